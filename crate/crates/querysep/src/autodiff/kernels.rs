//! Dense kernels behind the tape ops.
//!
//! Single-threaded, written so the inner loops autovectorize: matmul streams
//! one panel of B through L2 while four rows of A feed independent FMA
//! chains, convolutions lower to im2col + matmul.

use super::Scalar;

const PANEL: usize = 512;

/// c[m,n] += a[m,k] * b[k,n]. `c` must already hold the additive identity
/// (or a partial sum to extend).
pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    for j0 in (0..n).step_by(PANEL) {
        let jw = (n - j0).min(PANEL);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n + j0..i * n + j0 + jw];
            let mut p = 0;
            while p + 4 <= k {
                let a0 = arow[p];
                let a1 = arow[p + 1];
                let a2 = arow[p + 2];
                let a3 = arow[p + 3];
                let b0 = &b[p * n + j0..p * n + j0 + jw];
                let b1 = &b[(p + 1) * n + j0..(p + 1) * n + j0 + jw];
                let b2 = &b[(p + 2) * n + j0..(p + 2) * n + j0 + jw];
                let b3 = &b[(p + 3) * n + j0..(p + 3) * n + j0 + jw];
                for j in 0..jw {
                    crow[j] = crow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                p += 4;
            }
            while p < k {
                let ap = arow[p];
                let brow = &b[p * n + j0..p * n + j0 + jw];
                for j in 0..jw {
                    crow[j] = crow[j] + ap * brow[j];
                }
                p += 1;
            }
        }
    }
}

/// out[n,m] = a[m,n] transposed.
pub fn transpose_into<S: Scalar>(a: &[S], out: &mut [S], m: usize, n: usize) {
    assert_eq!(a.len(), m * n);
    assert_eq!(out.len(), m * n);
    const TB: usize = 32;
    for i0 in (0..m).step_by(TB) {
        for j0 in (0..n).step_by(TB) {
            for i in i0..(i0 + TB).min(m) {
                for j in j0..(j0 + TB).min(n) {
                    out[j * m + i] = a[i * n + j];
                }
            }
        }
    }
}

/// Unrolls conv patches: x[c,h,w] -> cols[(c*kh*kw), (ho*wo)] where column
/// (oh,ow) holds the receptive field at output position (oh,ow). Out-of-range
/// taps (from padding) read as zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    assert_eq!(x.len(), ch * h * w);
    let mut cols = vec![S::ZERO; ch * kh * kw * ho * wo];
    for c in 0..ch {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((c * kh + u) * kw + v) * (ho * wo);
                for oh in 0..ho {
                    let ih = (oh * stride + u) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xbase = (c * h + ih as usize) * w;
                    let cbase = row + oh * wo;
                    for ow in 0..wo {
                        let iw = (ow * stride + v) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            cols[cbase + ow] = x[xbase + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds cols back into an image of shape
/// [c,h,w]. Positions a patch never touched stay zero.
#[allow(clippy::too_many_arguments)]
pub fn col2im<S: Scalar>(
    cols: &[S],
    ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    assert_eq!(cols.len(), ch * kh * kw * ho * wo);
    let mut x = vec![S::ZERO; ch * h * w];
    for c in 0..ch {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((c * kh + u) * kw + v) * (ho * wo);
                for oh in 0..ho {
                    let ih = (oh * stride + u) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xbase = (c * h + ih as usize) * w;
                    let cbase = row + oh * wo;
                    for ow in 0..wo {
                        let iw = (ow * stride + v) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            x[xbase + iw as usize] = x[xbase + iw as usize] + cols[cbase + ow];
                        }
                    }
                }
            }
        }
    }
    x
}
