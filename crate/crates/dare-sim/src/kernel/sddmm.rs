//! SDDMM lowering: compute `A x B` only at the mask's structural
//! nonzeros.
//!
//! The image holds A row-major (rows x K int8), B row-transposed
//! (cols x K int8, so one register row is one output column's slice of
//! B), a 64-byte zero block for accumulator clearing, the int32 output
//! grid, and the base-address-vector records.
//!
//! Per mask column `j` the needed rows of A are gathered (GSA) or split
//! into uniform-stride runs (BASELINE); the `mma` then computes one
//! int32 per packed row against column `j`'s slice of B. Packed GSA
//! results scatter back through an output base-vector table; baseline
//! runs store with a strided `mst`.

use crate::isa::{MReg, MATRIX_REG_ROWS, MATRIX_REG_ROW_BYTES};
use crate::sparse::CscMatrix;

use super::emit::{encode_vec_record, pack_base_vectors, ProgramBuilder, VEC_RECORD_BYTES};
use super::{pad16, stride_runs, InstrRole, KernelError, KernelProgram, KernelVariant, MemoryImage, OutputDesc};

struct RegSet {
    a: MReg,
    b: MReg,
    acc: MReg,
    vec: MReg,
}

fn reg_set(parity: usize) -> RegSet {
    let r = |i: u8| MReg::new(i).unwrap();
    if parity == 0 {
        RegSet { a: r(0), b: r(1), acc: r(2), vec: r(3) }
    } else {
        RegSet { a: r(4), b: r(5), acc: r(6), vec: r(7) }
    }
}

pub fn gen_sddmm(
    mask: &CscMatrix,
    a: &[i8],
    b: &[i8],
    k: usize,
    variant: KernelVariant,
    tile_caps: crate::isa::CsrConfig,
) -> Result<KernelProgram, KernelError> {
    if a.len() != mask.rows() * k {
        return Err(KernelError::DimensionMismatch(format!(
            "A is {} bytes, expected {} x {}",
            a.len(),
            mask.rows(),
            k
        )));
    }
    if b.len() != k * mask.cols() {
        return Err(KernelError::DimensionMismatch(format!(
            "B is {} bytes, expected {} x {}",
            b.len(),
            k,
            mask.cols()
        )));
    }
    let m_cap = tile_caps.m().min(MATRIX_REG_ROWS);
    let k_cap = tile_caps.k().min(MATRIX_REG_ROW_BYTES);

    let rows_p = pad16(mask.rows());
    let cols_p = pad16(mask.cols());

    // A padded to rows_p x k, row-major.
    let mut a_img = vec![0u8; rows_p * k];
    for r in 0..mask.rows() {
        for kk in 0..k {
            a_img[r * k + kk] = a[r * k + kk] as u8;
        }
    }
    // B transposed: cols_p rows of k bytes; row j holds B[0..k][j].
    let mut bt_img = vec![0u8; cols_p * k];
    for j in 0..mask.cols() {
        for kk in 0..k {
            bt_img[j * k + kk] = b[kk * mask.cols() + j] as u8;
        }
    }

    let mut image = MemoryImage::new();
    let zeros_base = image.add_region("zeros", vec![0u8; 64]);
    let a_base = image.add_region("a", a_img);
    let bt_base = image.add_region("bt", bt_img);
    let c_base = image.add_region("c", vec![0u8; rows_p * cols_p * 4]);

    let mut pb = ProgramBuilder::new();
    let mut tile = 0usize;
    for j in 0..mask.cols() {
        let (rows, _) = mask.column(j);
        if rows.is_empty() {
            continue;
        }
        let passes: Vec<(usize, usize)> = (0..k)
            .step_by(k_cap)
            .map(|k0| (k0, k_cap.min(k - k0)))
            .collect();
        match variant {
            KernelVariant::Baseline => {
                for &(row0, stride, len) in &stride_runs(rows, m_cap) {
                    let rs = reg_set(tile % 2);
                    tile += 1;
                    // Zero the accumulator window: len rows of one int32.
                    pb.ensure_shape(Some(len), Some(4), Some(1))?;
                    pb.mld(rs.acc, zeros_base, 0, InstrRole::AccInit);
                    for &(k0, kp) in &passes {
                        pb.ensure_shape(Some(1), Some(kp), None)?;
                        pb.mld(rs.b, bt_base + (j * k + k0) as u64, 0, InstrRole::OperandB);
                        pb.ensure_shape(Some(len), None, None)?;
                        pb.mld(
                            rs.a,
                            a_base + (row0 * k + k0) as u64,
                            (stride * k) as i64,
                            InstrRole::OperandA,
                        );
                        pb.mma(rs.acc, rs.a, rs.b);
                    }
                    pb.ensure_shape(None, Some(4), None)?;
                    pb.mst(
                        rs.acc,
                        c_base + ((row0 * cols_p + j) * 4) as u64,
                        (stride * cols_p * 4) as i64,
                    );
                }
            }
            KernelVariant::Gsa => {
                for group in rows.chunks(m_cap) {
                    let rs = reg_set(tile % 2);
                    tile += 1;
                    let len = group.len();
                    pb.ensure_shape(Some(len), Some(4), Some(1))?;
                    pb.mld(rs.acc, zeros_base, 0, InstrRole::AccInit);
                    for &(k0, kp) in &passes {
                        let in_addrs: Vec<u64> =
                            group.iter().map(|&r| a_base + (r * k + k0) as u64).collect();
                        let rec = pack_base_vectors(&in_addrs, len);
                        debug_assert_eq!(rec.len(), 1);
                        pb.mld_vec(rs.vec, rec[0], len)?;
                        pb.ensure_shape(Some(1), Some(kp), None)?;
                        pb.mld(rs.b, bt_base + (j * k + k0) as u64, 0, InstrRole::OperandB);
                        pb.ensure_shape(Some(len), None, None)?;
                        pb.mgather(rs.a, rs.vec, InstrRole::OperandA);
                        pb.mma(rs.acc, rs.a, rs.b);
                    }
                    let out_addrs: Vec<u64> = group
                        .iter()
                        .map(|&r| c_base + ((r * cols_p + j) * 4) as u64)
                        .collect();
                    let rec = pack_base_vectors(&out_addrs, len);
                    pb.mld_vec(rs.vec, rec[0], len)?;
                    pb.ensure_shape(None, Some(4), None)?;
                    pb.mscatter(rs.acc, rs.vec);
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
            cols: cols_p,
            elem_bytes: 4,
        },
        vec_records,
    })
}
