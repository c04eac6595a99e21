//! The DARE instruction set: an AMX-style RISC-V matrix extension with
//! eight 1 KB matrix registers (16 rows x 64 bytes), three shape CSRs
//! (`matrixM`, `matrixK`, `matrixN`), strided load/store (`mld`/`mst`),
//! a multiply-accumulate (`mma`), and the gather/scatter pair
//! (`mgather`/`mscatter`) that takes per-row base addresses from the
//! first 48 bits of each row of a matrix register.
//!
//! Everything in this module is functional (timing-free) and
//! deterministic; the cycle-level machine in [`crate::mpu`] reuses these
//! semantics for its architectural state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod asm;

/// Number of architectural matrix registers (`m0`..`m7`).
pub const MATRIX_REG_COUNT: usize = 8;
/// Rows per matrix register.
pub const MATRIX_REG_ROWS: usize = 16;
/// Bytes per matrix register row.
pub const MATRIX_REG_ROW_BYTES: usize = 64;
/// Physical addresses are flat 48-bit.
pub const ADDR_BITS: u32 = 48;
pub const ADDR_MASK: u64 = (1u64 << ADDR_BITS) - 1;
/// Memory uops are decomposed into 64-byte line requests.
pub const LINE_BYTES: u64 = 64;
/// Bytes of a packed base-address lane (48-bit little-endian).
pub const LANE_BYTES: usize = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("csr {field:?} value {value} outside legal range")]
    InvalidCsrValue { field: CsrField, value: u64 },
    #[error("matrix register index {0} out of range (8 registers)")]
    InvalidRegister(u8),
    #[error("address {0:#x} outside the 48-bit physical range")]
    AddressOverflow(i128),
    #[error("row count {0} exceeds the 16-row register geometry")]
    TooManyRows(usize),
}

/// Shape CSR indices as used by `mcfg`'s rs1 operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CsrField {
    MatrixM,
    MatrixK,
    MatrixN,
}

impl CsrField {
    pub fn index(self) -> u64 {
        match self {
            CsrField::MatrixM => 0,
            CsrField::MatrixK => 1,
            CsrField::MatrixN => 2,
        }
    }

    pub fn from_index(idx: u64) -> Option<Self> {
        match idx {
            0 => Some(CsrField::MatrixM),
            1 => Some(CsrField::MatrixK),
            2 => Some(CsrField::MatrixN),
            _ => None,
        }
    }
}

/// Snapshot of the three shape CSRs. `matrixM` and `matrixN` count rows
/// (1..=16); `matrixK` counts bytes per row (1..=64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsrConfig {
    m: u8,
    k: u8,
    n: u8,
}

impl CsrConfig {
    pub fn new(m: usize, k: usize, n: usize) -> Result<Self, IsaError> {
        if m < 1 || m > MATRIX_REG_ROWS {
            return Err(IsaError::InvalidCsrValue {
                field: CsrField::MatrixM,
                value: m as u64,
            });
        }
        if k < 1 || k > MATRIX_REG_ROW_BYTES {
            return Err(IsaError::InvalidCsrValue {
                field: CsrField::MatrixK,
                value: k as u64,
            });
        }
        if n < 1 || n > MATRIX_REG_ROWS {
            return Err(IsaError::InvalidCsrValue {
                field: CsrField::MatrixN,
                value: n as u64,
            });
        }
        Ok(CsrConfig {
            m: m as u8,
            k: k as u8,
            n: n as u8,
        })
    }

    pub fn m(&self) -> usize {
        self.m as usize
    }

    pub fn k(&self) -> usize {
        self.k as usize
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }
}

impl Default for CsrConfig {
    /// Reset shape: the full register geometry.
    fn default() -> Self {
        CsrConfig { m: 16, k: 64, n: 16 }
    }
}

/// Writes one CSR field, leaving the others untouched. Values outside
/// the field's legal range are rejected at decode.
pub fn apply_mcfg(cfg: CsrConfig, field: CsrField, value: u64) -> Result<CsrConfig, IsaError> {
    let v = value as usize;
    match field {
        CsrField::MatrixM => CsrConfig::new(v, cfg.k(), cfg.n()),
        CsrField::MatrixK => CsrConfig::new(cfg.m(), v, cfg.n()),
        CsrField::MatrixN => CsrConfig::new(cfg.m(), cfg.k(), v),
    }
    .map_err(|_| IsaError::InvalidCsrValue { field, value })
}

/// A matrix register index, validated `< 8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MReg(u8);

impl MReg {
    pub fn new(idx: u8) -> Result<Self, IsaError> {
        if (idx as usize) < MATRIX_REG_COUNT {
            Ok(MReg(idx))
        } else {
            Err(IsaError::InvalidRegister(idx))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn bit(self) -> u8 {
        1 << self.0
    }
}

impl std::fmt::Display for MReg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Operation payload of a decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstrKind {
    Mcfg { field: CsrField, value: u64 },
    Mld { dst: MReg, base: u64, stride: i64 },
    Mst { src: MReg, base: u64, stride: i64 },
    Mma { dst: MReg, a: MReg, b: MReg },
    Mgather { dst: MReg, addr: MReg },
    Mscatter { src: MReg, addr: MReg },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Opcode {
    Mcfg,
    Mld,
    Mst,
    Mma,
    Mgather,
    Mscatter,
}

/// A decoded DARE instruction. The shape CSRs are snapshotted at decode
/// time; `id` is the dispatch sequence number and strictly increases in
/// program order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: u64,
    pub shape: CsrConfig,
    pub kind: InstrKind,
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match self.kind {
            InstrKind::Mcfg { .. } => Opcode::Mcfg,
            InstrKind::Mld { .. } => Opcode::Mld,
            InstrKind::Mst { .. } => Opcode::Mst,
            InstrKind::Mma { .. } => Opcode::Mma,
            InstrKind::Mgather { .. } => Opcode::Mgather,
            InstrKind::Mscatter { .. } => Opcode::Mscatter,
        }
    }

    pub fn is_load(&self) -> bool {
        matches!(self.kind, InstrKind::Mld { .. } | InstrKind::Mgather { .. })
    }

    pub fn is_store(&self) -> bool {
        matches!(self.kind, InstrKind::Mst { .. } | InstrKind::Mscatter { .. })
    }

    pub fn is_mem(&self) -> bool {
        self.is_load() || self.is_store()
    }

    /// Bitmask of matrix registers this instruction reads.
    pub fn reads(&self) -> u8 {
        match self.kind {
            InstrKind::Mcfg { .. } | InstrKind::Mld { .. } => 0,
            InstrKind::Mst { src, .. } => src.bit(),
            InstrKind::Mma { dst, a, b } => dst.bit() | a.bit() | b.bit(),
            InstrKind::Mgather { addr, .. } => addr.bit(),
            InstrKind::Mscatter { src, addr } => src.bit() | addr.bit(),
        }
    }

    /// Bitmask of matrix registers this instruction writes.
    pub fn writes(&self) -> u8 {
        match self.kind {
            InstrKind::Mcfg { .. } | InstrKind::Mst { .. } | InstrKind::Mscatter { .. } => 0,
            InstrKind::Mld { dst, .. } => dst.bit(),
            InstrKind::Mma { dst, .. } => dst.bit(),
            InstrKind::Mgather { dst, .. } => dst.bit(),
        }
    }

    /// For gather/scatter: the register providing the base address vector.
    pub fn addr_source(&self) -> Option<MReg> {
        match self.kind {
            InstrKind::Mgather { addr, .. } | InstrKind::Mscatter { addr, .. } => Some(addr),
            _ => None,
        }
    }
}

/// Memory micro-operation kinds. Memory instructions decompose into one
/// uop per matrix register row; runahead issues the prefetch kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UopKind {
    Demand,
    TentativePrefetch,
    Prefetch,
    ChainLoad,
}

/// One row-granular memory micro-operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Uop {
    pub parent: u64,
    pub row: usize,
    pub kind: UopKind,
    /// 64-byte-aligned line addresses covering `[row_base, row_base + matrixK)`.
    pub lines: Vec<u64>,
    pub issue_cycle: Option<u64>,
    pub complete_cycle: Option<u64>,
}

/// Per-row base addresses for a strided access: `base + i * stride`.
/// Any address escaping the 48-bit range is a fault.
pub fn gen_strided_addresses(base: u64, stride: i64, rows: usize) -> Result<Vec<u64>, IsaError> {
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let addr = base as i128 + (i as i128) * (stride as i128);
        if addr < 0 || addr > ADDR_MASK as i128 {
            return Err(IsaError::AddressOverflow(addr));
        }
        out.push(addr as u64);
    }
    Ok(out)
}

/// Per-row base addresses for a gather/scatter: the first `rows` lanes of
/// the base address vector, each masked to 48 bits. Masking is total, so
/// this cannot fault.
pub fn gen_gather_addresses(lanes: &[u64], rows: usize) -> Vec<u64> {
    lanes.iter().take(rows).map(|&v| v & ADDR_MASK).collect()
}

/// The 64-byte-aligned lines a row access touches. A row spanning a line
/// boundary yields one address per distinct line.
pub fn row_line_addresses(row_base: u64, k: usize) -> Vec<u64> {
    if k == 0 {
        return Vec::new();
    }
    let first = row_base & !(LINE_BYTES - 1);
    let last = (row_base + k as u64 - 1) & !(LINE_BYTES - 1);
    let mut lines = Vec::with_capacity(2);
    let mut line = first;
    loop {
        lines.push(line);
        if line == last {
            break;
        }
        line += LINE_BYTES;
    }
    lines
}

/// `result[m][n] = acc[m][n] + sum_k a[m][k] * b[n][k]` over wrapping
/// 32-bit arithmetic. `a` is matrixM x matrixK int8, `b` is
/// matrixN x matrixK int8 (the B operand is stored row-transposed).
pub fn mma_execute(
    acc: &[[i32; MATRIX_REG_ROWS]; MATRIX_REG_ROWS],
    a: &[[i8; MATRIX_REG_ROW_BYTES]; MATRIX_REG_ROWS],
    b: &[[i8; MATRIX_REG_ROW_BYTES]; MATRIX_REG_ROWS],
    shape: CsrConfig,
) -> [[i32; MATRIX_REG_ROWS]; MATRIX_REG_ROWS] {
    let mut out = *acc;
    for m in 0..shape.m() {
        for n in 0..shape.n() {
            let mut v = acc[m][n];
            for k in 0..shape.k() {
                v = v.wrapping_add((a[m][k] as i32).wrapping_mul(b[n][k] as i32));
            }
            out[m][n] = v;
        }
    }
    out
}

/// Architectural matrix register file: eight 1 KB registers.
#[derive(Clone)]
pub struct MatrixRegisterFile {
    regs: Box<[[u8; MATRIX_REG_ROWS * MATRIX_REG_ROW_BYTES]; MATRIX_REG_COUNT]>,
}

impl Default for MatrixRegisterFile {
    fn default() -> Self {
        MatrixRegisterFile {
            regs: Box::new([[0; MATRIX_REG_ROWS * MATRIX_REG_ROW_BYTES]; MATRIX_REG_COUNT]),
        }
    }
}

impl MatrixRegisterFile {
    pub fn row(&self, reg: MReg, row: usize) -> &[u8] {
        let r = &self.regs[reg.index()];
        &r[row * MATRIX_REG_ROW_BYTES..(row + 1) * MATRIX_REG_ROW_BYTES]
    }

    pub fn row_mut(&mut self, reg: MReg, row: usize) -> &mut [u8] {
        let r = &mut self.regs[reg.index()];
        &mut r[row * MATRIX_REG_ROW_BYTES..(row + 1) * MATRIX_REG_ROW_BYTES]
    }

    /// The 48-bit little-endian lane at the start of a row, as used by
    /// gather/scatter base address vectors.
    pub fn lane48(&self, reg: MReg, row: usize) -> u64 {
        let row = self.row(reg, row);
        let mut v = 0u64;
        for (i, &byte) in row[..LANE_BYTES].iter().enumerate() {
            v |= (byte as u64) << (8 * i);
        }
        v
    }

    /// All 16 row lanes of a register.
    pub fn lanes48(&self, reg: MReg) -> [u64; MATRIX_REG_ROWS] {
        let mut out = [0u64; MATRIX_REG_ROWS];
        for (row, lane) in out.iter_mut().enumerate() {
            *lane = self.lane48(reg, row);
        }
        out
    }

    /// Runs an `mma` on register state: reads the int8 operand windows of
    /// `a` and `b`, accumulates into the little-endian int32 window of
    /// `dst`, and leaves every byte outside the M x N int32 window
    /// unchanged.
    pub fn mma_on_registers(&mut self, dst: MReg, a: MReg, b: MReg, shape: CsrConfig) {
        let mut at = [[0i8; MATRIX_REG_ROW_BYTES]; MATRIX_REG_ROWS];
        let mut bt = [[0i8; MATRIX_REG_ROW_BYTES]; MATRIX_REG_ROWS];
        for m in 0..shape.m() {
            let row = self.row(a, m);
            for k in 0..shape.k() {
                at[m][k] = row[k] as i8;
            }
        }
        for n in 0..shape.n() {
            let row = self.row(b, n);
            for k in 0..shape.k() {
                bt[n][k] = row[k] as i8;
            }
        }
        let mut acc = [[0i32; MATRIX_REG_ROWS]; MATRIX_REG_ROWS];
        for m in 0..shape.m() {
            let row = self.row(dst, m);
            for n in 0..shape.n() {
                acc[m][n] = i32::from_le_bytes(row[4 * n..4 * n + 4].try_into().unwrap());
            }
        }
        let out = mma_execute(&acc, &at, &bt, shape);
        for m in 0..shape.m() {
            let row = self.row_mut(dst, m);
            for n in 0..shape.n() {
                row[4 * n..4 * n + 4].copy_from_slice(&out[m][n].to_le_bytes());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcfg_replaces_single_field() {
        let cfg = CsrConfig::new(16, 64, 16).unwrap();
        let cfg = apply_mcfg(cfg, CsrField::MatrixK, 32).unwrap();
        assert_eq!((cfg.m(), cfg.k(), cfg.n()), (16, 32, 16));
    }

    #[test]
    fn mcfg_idempotent_write() {
        let cfg = CsrConfig::new(1, 1, 1).unwrap();
        let cfg = apply_mcfg(cfg, CsrField::MatrixM, 1).unwrap();
        assert_eq!((cfg.m(), cfg.k(), cfg.n()), (1, 1, 1));
    }

    #[test]
    fn mcfg_rejects_out_of_range() {
        let cfg = CsrConfig::default();
        assert!(apply_mcfg(cfg, CsrField::MatrixK, 65).is_err());
        assert!(apply_mcfg(cfg, CsrField::MatrixM, 0).is_err());
        assert!(apply_mcfg(cfg, CsrField::MatrixN, 17).is_err());
    }

    #[test]
    fn strided_zero_stride_single_row() {
        assert_eq!(gen_strided_addresses(0x1000, 0, 1).unwrap(), vec![0x1000]);
    }

    #[test]
    fn strided_positive() {
        assert_eq!(
            gen_strided_addresses(0x1000, 0x40, 4).unwrap(),
            vec![0x1000, 0x1040, 0x1080, 0x10C0]
        );
    }

    #[test]
    fn strided_negative_matches_scalar_loop() {
        let got = gen_strided_addresses(0x2000, -0x40, 2).unwrap();
        // Scalar-loop oracle over signed arithmetic.
        let mut expect = Vec::new();
        let mut cur = 0x2000i64;
        for _ in 0..2 {
            expect.push(cur as u64);
            cur -= 0x40;
        }
        assert_eq!(got, expect);
        assert_eq!(got, vec![0x2000, 0x1FC0]);
    }

    #[test]
    fn strided_overflow_faults() {
        assert!(gen_strided_addresses(ADDR_MASK, 1, 2).is_err());
        assert!(gen_strided_addresses(0x10, -0x20, 2).is_err());
    }

    #[test]
    fn gather_projects_and_masks() {
        let mut lanes = [0u64; 16];
        lanes[0] = 0x100;
        lanes[1] = 0x900;
        lanes[2] = 0x500;
        assert_eq!(gen_gather_addresses(&lanes, 3), vec![0x100, 0x900, 0x500]);
        // Oracle for the mask is modular arithmetic: (2^48 + 4) mod 2^48 = 4.
        let big = [(1u64 << 48) + 4];
        assert_eq!(gen_gather_addresses(&big, 1), vec![4]);
        assert_eq!(gen_gather_addresses(&lanes, 0), Vec::<u64>::new());
    }

    #[test]
    fn row_lines_cover_exact_footprint() {
        assert_eq!(row_line_addresses(0x1000, 64), vec![0x1000]);
        // Crossing a line boundary yields one request per distinct line.
        assert_eq!(row_line_addresses(0x1001, 64), vec![0x1000, 0x1040]);
        assert_eq!(row_line_addresses(0x103F, 2), vec![0x1000, 0x1040]);
        assert_eq!(row_line_addresses(0x1000, 1), vec![0x1000]);
    }

    #[test]
    fn mma_zero_annihilator() {
        let acc = [[0i32; 16]; 16];
        let a = [[0i8; 64]; 16];
        let mut b = [[0i8; 64]; 16];
        b[3][5] = 77;
        let shape = CsrConfig::new(8, 8, 8).unwrap();
        assert_eq!(mma_execute(&acc, &a, &b, shape), [[0i32; 16]; 16]);
    }

    #[test]
    fn mma_identity_transposes_b() {
        let acc = [[0i32; 16]; 16];
        let mut a = [[0i8; 64]; 16];
        for i in 0..4 {
            a[i][i] = 1;
        }
        let mut b = [[0i8; 64]; 16];
        let mut v = 1i8;
        for n in 0..4 {
            for k in 0..4 {
                b[n][k] = v;
                v += 1;
            }
        }
        let shape = CsrConfig::new(4, 4, 4).unwrap();
        let out = mma_execute(&acc, &a, &b, shape);
        for m in 0..4 {
            for n in 0..4 {
                assert_eq!(out[m][n], b[n][m] as i32);
            }
        }
    }

    #[test]
    fn mma_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xDA_8E);
        let mut a = [[0i8; 64]; 16];
        let mut b = [[0i8; 64]; 16];
        let mut acc = [[0i32; 16]; 16];
        for m in 0..8 {
            for k in 0..8 {
                a[m][k] = rng.gen();
                b[m][k] = rng.gen();
            }
            for n in 0..8 {
                acc[m][n] = rng.gen();
            }
        }
        let shape = CsrConfig::new(8, 8, 8).unwrap();
        let got = mma_execute(&acc, &a, &b, shape);
        for m in 0..8 {
            for n in 0..8 {
                let mut v = acc[m][n];
                for k in 0..8 {
                    v = v.wrapping_add(a[m][k] as i32 * b[n][k] as i32);
                }
                assert_eq!(got[m][n], v, "mismatch at ({m},{n})");
            }
        }
    }

    #[test]
    fn register_lane48_little_endian() {
        let mut rf = MatrixRegisterFile::default();
        let reg = MReg::new(2).unwrap();
        rf.row_mut(reg, 1)[..6].copy_from_slice(&[0x01, 0x02, 0x03, 0x04, 0x05, 0x06]);
        assert_eq!(rf.lane48(reg, 1), 0x0605_0403_0201);
    }

    #[test]
    fn mma_on_registers_preserves_bytes_outside_window() {
        let mut rf = MatrixRegisterFile::default();
        let (d, a, b) = (MReg::new(0).unwrap(), MReg::new(1).unwrap(), MReg::new(2).unwrap());
        rf.row_mut(a, 0)[0] = 3;
        rf.row_mut(b, 0)[0] = 5;
        rf.row_mut(d, 0)[8] = 0xAB; // outside the 1x1 int32 window
        rf.row_mut(d, 2)[0] = 0xCD; // row outside matrixM
        let shape = CsrConfig::new(1, 1, 1).unwrap();
        rf.mma_on_registers(d, a, b, shape);
        assert_eq!(
            i32::from_le_bytes(rf.row(d, 0)[..4].try_into().unwrap()),
            15
        );
        assert_eq!(rf.row(d, 0)[8], 0xAB);
        assert_eq!(rf.row(d, 2)[0], 0xCD);
    }
}
