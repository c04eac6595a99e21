//! Dense triple-loop reference implementations. These never touch the
//! instruction path: they exist so tests and callers can check generated
//! programs against an independent computation.

use crate::sparse::CscMatrix;

/// SDDMM reference: `C[i][j] = sum_k A[i][k] * B[k][j]` at the mask's
/// structural nonzeros, 0 elsewhere. Output is row-major little-endian
/// int32 over `out_rows x out_cols` (the padded output geometry).
pub fn dense_sddmm(
    mask: &CscMatrix,
    a: &[i8],
    b: &[i8],
    k: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<u8> {
    let n = mask.cols();
    let mut out = vec![0u8; out_rows * out_cols * 4];
    for (r, c, _) in mask.iter() {
        let mut acc = 0i32;
        for kk in 0..k {
            let av = a[r * k + kk] as i32;
            let bv = b[kk * n + c] as i32;
            acc = acc.wrapping_add(av.wrapping_mul(bv));
        }
        let off = (r * out_cols + c) * 4;
        out[off..off + 4].copy_from_slice(&acc.to_le_bytes());
    }
    out
}

/// SpMM reference: `C = S * B` dense, row-major little-endian int32 over
/// `out_rows x out_cols`.
pub fn dense_spmm(
    s: &CscMatrix,
    b: &[i8],
    n: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<u8> {
    let mut acc = vec![0i32; out_rows * out_cols];
    for (r, c, v) in s.iter() {
        let sv = v as i32;
        for j in 0..n {
            let bv = b[c * n + j] as i32;
            acc[r * out_cols + j] = acc[r * out_cols + j].wrapping_add(sv.wrapping_mul(bv));
        }
    }
    let mut out = vec![0u8; out_rows * out_cols * 4];
    for (i, v) in acc.iter().enumerate() {
        out[i * 4..i * 4 + 4].copy_from_slice(&v.to_le_bytes());
    }
    out
}
