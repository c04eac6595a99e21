//! SpMM lowering: `C = S x B` with S sparse (CSC) and B dense.
//!
//! The contraction axis is S's column dimension, so sparsity is handled
//! by panel selection: only columns that actually carry nonzeros are
//! loaded, in maximal contiguous runs. S is materialized dense in the
//! image (padded rows x cols int8) and B row-transposed, so one `mma`
//! per (row tile, column run, output panel) accumulates the partial
//! products.
//!
//! BASELINE walks fixed 16-row windows and keeps the accumulator in a
//! register across a window's runs. GSA instead packs only the rows
//! that have nonzeros in the run — scattered rows fetched with
//! `mgather` — which makes each tile denser when nonzero rows are
//! spread out; since packed row sets differ between runs, the
//! accumulator round-trips through the output grid (`mgather` it,
//! accumulate, `mscatter` it back).

use std::collections::BTreeSet;

use crate::isa::{MReg, MATRIX_REG_ROWS, MATRIX_REG_ROW_BYTES};
use crate::sparse::CscMatrix;

use super::emit::{encode_vec_record, pack_base_vectors, ProgramBuilder, VEC_RECORD_BYTES};
use super::{contiguous_runs, pad16, InstrRole, KernelError, KernelProgram, KernelVariant, MemoryImage, OutputDesc};

pub fn gen_spmm(
    s: &CscMatrix,
    b: &[i8],
    n: usize,
    variant: KernelVariant,
    tile_caps: crate::isa::CsrConfig,
) -> Result<KernelProgram, KernelError> {
    if b.len() != s.cols() * n {
        return Err(KernelError::DimensionMismatch(format!(
            "B is {} bytes, expected {} x {}",
            b.len(),
            s.cols(),
            n
        )));
    }
    let m_cap = tile_caps.m().min(MATRIX_REG_ROWS);
    let k_cap = tile_caps.k().min(MATRIX_REG_ROW_BYTES);
    let n_cap = tile_caps.n().min(MATRIX_REG_ROWS);

    let rows_p = pad16(s.rows());
    let cols_p = pad16(s.cols());
    let n_p = pad16(n);

    // S dense, padded rows_p x cols_p.
    let mut s_img = vec![0u8; rows_p * cols_p];
    for (r, c, v) in s.iter() {
        s_img[r * cols_p + c] = v as u8;
    }
    // B transposed: n_p rows of cols_p bytes.
    let mut bt_img = vec![0u8; n_p * cols_p];
    for kk in 0..s.cols() {
        for j in 0..n {
            bt_img[j * cols_p + kk] = b[kk * n + j] as u8;
        }
    }

    let mut image = MemoryImage::new();
    let zeros_base = image.add_region("zeros", vec![0u8; 64]);
    let s_base = image.add_region("a", s_img);
    let bt_base = image.add_region("bt", bt_img);
    let c_base = image.add_region("c", vec![0u8; rows_p * n_p * 4]);

    let mut pb = ProgramBuilder::new();
    match variant {
        KernelVariant::Baseline => {
            let mut tile = 0usize;
            for w0 in (0..rows_p).step_by(MATRIX_REG_ROWS) {
                let mut needed: BTreeSet<usize> = BTreeSet::new();
                for (r, c, _) in s.iter() {
                    if (w0..w0 + MATRIX_REG_ROWS).contains(&r) {
                        needed.insert(c);
                    }
                }
                if needed.is_empty() {
                    continue;
                }
                let cols: Vec<usize> = needed.into_iter().collect();
                let runs = contiguous_runs(&cols, k_cap);
                for n0 in (0..n_p).step_by(n_cap) {
                    let np = n_cap.min(n_p - n0);
                    let r = |i: u8| MReg::new(i).unwrap();
                    let (ra, rb, racc) = if tile % 2 == 0 {
                        (r(0), r(1), r(2))
                    } else {
                        (r(4), r(5), r(6))
                    };
                    tile += 1;
                    pb.ensure_shape(Some(MATRIX_REG_ROWS), Some(4 * np), Some(np))?;
                    pb.mld(racc, zeros_base, 0, InstrRole::AccInit);
                    for &(c0, len) in &runs {
                        pb.ensure_shape(Some(np), Some(len), None)?;
                        pb.mld(
                            rb,
                            bt_base + (n0 * cols_p + c0) as u64,
                            cols_p as i64,
                            InstrRole::OperandB,
                        );
                        pb.ensure_shape(Some(MATRIX_REG_ROWS), None, None)?;
                        pb.mld(
                            ra,
                            s_base + (w0 * cols_p + c0) as u64,
                            cols_p as i64,
                            InstrRole::OperandA,
                        );
                        pb.mma(racc, ra, rb);
                    }
                    pb.ensure_shape(None, Some(4 * np), None)?;
                    pb.mst(racc, c_base + ((w0 * n_p + n0) * 4) as u64, (n_p * 4) as i64);
                }
            }
        }
        KernelVariant::Gsa => {
            let needed: Vec<usize> = {
                let mut set = BTreeSet::new();
                for (_, c, _) in s.iter() {
                    set.insert(c);
                }
                set.into_iter().collect()
            };
            let runs = contiguous_runs(&needed, k_cap);
            let r = |i: u8| MReg::new(i).unwrap();
            let (ra, rb, racc, rvs, rvc) = (r(0), r(1), r(2), r(3), r(4));
            for &(c0, len) in &runs {
                let rows_in_run: Vec<usize> = {
                    let mut set = BTreeSet::new();
                    for (rr, c, _) in s.iter() {
                        if (c0..c0 + len).contains(&c) {
                            set.insert(rr);
                        }
                    }
                    set.into_iter().collect()
                };
                for group in rows_in_run.chunks(m_cap) {
                    let g = group.len();
                    for n0 in (0..n_p).step_by(n_cap) {
                        let np = n_cap.min(n_p - n0);
                        let s_addrs: Vec<u64> = group
                            .iter()
                            .map(|&i| s_base + (i * cols_p + c0) as u64)
                            .collect();
                        let c_addrs: Vec<u64> = group
                            .iter()
                            .map(|&i| c_base + ((i * n_p + n0) * 4) as u64)
                            .collect();
                        pb.mld_vec(rvs, pack_base_vectors(&s_addrs, g)[0], g)?;
                        pb.mld_vec(rvc, pack_base_vectors(&c_addrs, g)[0], g)?;
                        pb.ensure_shape(Some(g), Some(len), Some(np))?;
                        pb.mgather(ra, rvs, InstrRole::OperandA);
                        pb.ensure_shape(None, Some(4 * np), None)?;
                        pb.mgather(racc, rvc, InstrRole::AccLoad);
                        pb.ensure_shape(Some(np), Some(len), None)?;
                        pb.mld(
                            rb,
                            bt_base + (n0 * cols_p + c0) as u64,
                            cols_p as i64,
                            InstrRole::OperandB,
                        );
                        pb.ensure_shape(Some(g), None, None)?;
                        pb.mma(racc, ra, rb);
                        pb.ensure_shape(None, Some(4 * np), None)?;
                        pb.mscatter(racc, rvc);
                    }
                }
            }
        }
    }

    let mut vec_bytes = Vec::with_capacity(pb.records().len() * VEC_RECORD_BYTES as usize);
    for rec in pb.records() {
        vec_bytes.extend_from_slice(&encode_vec_record(rec));
    }
    let vecs_base = image.add_region("vecs", vec_bytes);
    let (instrs, roles, vec_records) = pb.finish(vecs_base);

    Ok(KernelProgram {
        instrs,
        roles,
        image,
        output: OutputDesc {
            region: "c".to_string(),
            rows: rows_p,
            cols: n_p,
            elem_bytes: 4,
        },
        vec_records,
    })
}
