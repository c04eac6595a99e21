//! Lowers SpMM and SDDMM over a CSC matrix into DARE instruction
//! streams plus a memory image.
//!
//! Both kernels tile the computation into matrix-register operations
//! with the B operand stored row-transposed (N rows by K bytes), so one
//! `mma` contracts over the byte axis of both source registers. The two
//! variants differ in how sparsity shapes the tiles:
//!
//! - BASELINE uses only strided loads: scattered tile rows split into
//!   maximal uniform-stride runs, and contraction panels into maximal
//!   contiguous column runs.
//! - GSA packs scattered rows densely: up to matrixM needed rows per
//!   `mgather`, addressed through base-address-vector records that are
//!   themselves loaded with `mld`, with packed results written back via
//!   `mscatter` (or strided `mst` where the destination is uniform).
//!
//! Every generated program, run under the functional executor, produces
//! output byte-identical to the dense reference in [`oracle`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{self, Instruction, InstrKind, Opcode};

mod emit;
pub mod functional;
mod image;
pub mod oracle;
mod sddmm;
mod spmm;

pub use emit::{encode_vec_record, pack_base_vectors, VEC_RECORD_BYTES};
pub use functional::functional_run;
pub use image::{MemoryImage, Region};
pub use sddmm::gen_sddmm;
pub use spmm::gen_spmm;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("instruction {id}: memory access fault at {addr:#x}")]
    Fault { id: u64, addr: u64 },
    #[error("instruction {id}: gather/scatter base register not produced by a preceding mld")]
    BrokenAddressChain { id: u64 },
    #[error(transparent)]
    Isa(#[from] isa::IsaError),
}

/// Lowering flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelVariant {
    Baseline,
    Gsa,
}

/// What each emitted instruction is for; used by tests and stats, never
/// by execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstrRole {
    Config,
    BaseVector,
    OperandA,
    OperandB,
    AccInit,
    AccLoad,
    Compute,
    Output,
}

/// Where the result lives in the image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDesc {
    pub region: String,
    pub rows: usize,
    pub cols: usize,
    pub elem_bytes: usize,
}

/// A lowered kernel: the dispatch-order instruction stream, its memory
/// image, and the output descriptor for verification.
#[derive(Debug, Clone)]
pub struct KernelProgram {
    pub instrs: Vec<Instruction>,
    pub roles: Vec<InstrRole>,
    pub image: MemoryImage,
    pub output: OutputDesc,
    /// Addresses of the packed base-address-vector records, in emission
    /// order.
    pub vec_records: Vec<u64>,
}

impl KernelProgram {
    pub fn count_opcode(&self, op: Opcode) -> usize {
        self.instrs.iter().filter(|i| i.opcode() == op).count()
    }

    pub fn count_role(&self, role: InstrRole) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    /// Checks the address-chain invariant: every gather/scatter base
    /// register was produced by an earlier `mld` with no intervening
    /// overwrite.
    pub fn validate_chains(&self) -> Result<(), KernelError> {
        let mut last_writer: [Option<Opcode>; isa::MATRIX_REG_COUNT] = [None; isa::MATRIX_REG_COUNT];
        for instr in &self.instrs {
            if let Some(addr) = instr.addr_source() {
                if last_writer[addr.index()] != Some(Opcode::Mld) {
                    return Err(KernelError::BrokenAddressChain { id: instr.id });
                }
            }
            match instr.kind {
                InstrKind::Mld { dst, .. } | InstrKind::Mma { dst, .. } | InstrKind::Mgather { dst, .. } => {
                    last_writer[dst.index()] = Some(instr.opcode());
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The instruction stream in its textual assembly form.
    pub fn to_assembly(&self) -> String {
        isa::asm::format_program(&self.instrs)
    }

    /// The JSON layout manifest: regions, output descriptor and vector
    /// record addresses. Stable across runs for diffing.
    pub fn manifest_json(&self) -> serde_json::Value {
        serde_json::json!({
            "regions": self.image.manifest(),
            "output": self.output,
            "base_vectors": self.vec_records,
        })
    }
}

/// Splits sorted row indices into maximal uniform-stride runs, each at
/// most `cap` rows: a new run starts whenever the delta to the previous
/// row differs from the run's stride.
pub(crate) fn stride_runs(rows: &[usize], cap: usize) -> Vec<(usize, usize, usize)> {
    // (first row, stride, length); stride is 1 for single-row runs.
    let mut runs = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let start = rows[i];
        let mut len = 1;
        let mut stride = 1usize;
        if i + 1 < rows.len() {
            stride = rows[i + 1] - rows[i];
            len = 2;
            while i + len < rows.len() && len < cap && rows[i + len] - rows[i + len - 1] == stride {
                len += 1;
            }
            if len == 2 && cap < 2 {
                len = 1;
            }
        }
        len = len.min(cap);
        runs.push((start, stride, len));
        i += len;
    }
    runs
}

/// Maximal contiguous intervals over a sorted index set, chunked to at
/// most `cap` entries.
pub(crate) fn contiguous_runs(indices: &[usize], cap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < indices.len() {
        let start = indices[i];
        let mut len = 1;
        while i + len < indices.len() && indices[i + len] == start + len && len < cap {
            len += 1;
        }
        out.push((start, len));
        i += len;
    }
    out
}

pub(crate) fn pad16(v: usize) -> usize {
    v.div_ceil(16) * 16
}
