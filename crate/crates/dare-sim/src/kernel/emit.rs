//! Instruction-stream emission helpers shared by the kernel generators:
//! shape tracking with minimal `mcfg` diffs, role tagging, and base
//! address vector packing.

use crate::isa::{CsrConfig, CsrField, Instruction, InstrKind, MReg, LANE_BYTES, MATRIX_REG_ROWS};

use super::{InstrRole, KernelError};

/// Packs per-row base addresses into 16-lane vector records, at most
/// `matrix_m` live lanes per record. Unused lanes replicate the last
/// valid address so spurious rows read harmless bytes.
pub fn pack_base_vectors(addresses: &[u64], matrix_m: usize) -> Vec<[u64; MATRIX_REG_ROWS]> {
    assert!((1..=MATRIX_REG_ROWS).contains(&matrix_m));
    addresses
        .chunks(matrix_m)
        .map(|chunk| {
            let mut lanes = [*chunk.last().unwrap(); MATRIX_REG_ROWS];
            lanes[..chunk.len()].copy_from_slice(chunk);
            lanes
        })
        .collect()
}

/// Encodes one record as 16 packed 48-bit little-endian lanes.
pub fn encode_vec_record(lanes: &[u64; MATRIX_REG_ROWS]) -> [u8; MATRIX_REG_ROWS * LANE_BYTES] {
    let mut out = [0u8; MATRIX_REG_ROWS * LANE_BYTES];
    for (i, &lane) in lanes.iter().enumerate() {
        out[i * LANE_BYTES..(i + 1) * LANE_BYTES].copy_from_slice(&lane.to_le_bytes()[..LANE_BYTES]);
    }
    out
}

/// Byte footprint of one stored record.
pub const VEC_RECORD_BYTES: u64 = (MATRIX_REG_ROWS * LANE_BYTES) as u64;

pub(super) struct ProgramBuilder {
    instrs: Vec<Instruction>,
    roles: Vec<InstrRole>,
    cfg: CsrConfig,
    /// Records referenced by emitted base-vector loads; their `base`
    /// fields hold record indices until `patch_vec_bases` resolves them.
    records: Vec<[u64; MATRIX_REG_ROWS]>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        ProgramBuilder {
            instrs: Vec::new(),
            roles: Vec::new(),
            cfg: CsrConfig::default(),
            records: Vec::new(),
        }
    }

    fn push(&mut self, kind: InstrKind, role: InstrRole) {
        self.instrs.push(Instruction {
            id: self.instrs.len() as u64,
            shape: self.cfg,
            kind,
        });
        self.roles.push(role);
    }

    /// Brings the decode shape to the requested values, emitting one
    /// `mcfg` per differing field.
    pub fn ensure_shape(
        &mut self,
        m: Option<usize>,
        k: Option<usize>,
        n: Option<usize>,
    ) -> Result<(), KernelError> {
        let target = CsrConfig::new(
            m.unwrap_or(self.cfg.m()),
            k.unwrap_or(self.cfg.k()),
            n.unwrap_or(self.cfg.n()),
        )?;
        for (field, cur, want) in [
            (CsrField::MatrixM, self.cfg.m(), target.m()),
            (CsrField::MatrixK, self.cfg.k(), target.k()),
            (CsrField::MatrixN, self.cfg.n(), target.n()),
        ] {
            if cur != want {
                self.cfg = crate::isa::apply_mcfg(self.cfg, field, want as u64)?;
                self.push(
                    InstrKind::Mcfg {
                        field,
                        value: want as u64,
                    },
                    InstrRole::Config,
                );
            }
        }
        Ok(())
    }

    pub fn mld(&mut self, dst: MReg, base: u64, stride: i64, role: InstrRole) {
        self.push(InstrKind::Mld { dst, base, stride }, role);
    }

    /// Loads a base address vector: shapes to (rows, 6 bytes) and emits
    /// an `mld` whose base is patched to the record's address later.
    pub fn mld_vec(&mut self, dst: MReg, lanes: [u64; MATRIX_REG_ROWS], rows: usize) -> Result<(), KernelError> {
        self.ensure_shape(Some(rows), Some(LANE_BYTES), None)?;
        let idx = self.records.len() as u64;
        self.records.push(lanes);
        self.push(
            InstrKind::Mld {
                dst,
                base: idx,
                stride: LANE_BYTES as i64,
            },
            InstrRole::BaseVector,
        );
        Ok(())
    }

    pub fn mst(&mut self, src: MReg, base: u64, stride: i64) {
        self.push(InstrKind::Mst { src, base, stride }, InstrRole::Output);
    }

    pub fn mma(&mut self, dst: MReg, a: MReg, b: MReg) {
        self.push(InstrKind::Mma { dst, a, b }, InstrRole::Compute);
    }

    pub fn mgather(&mut self, dst: MReg, addr: MReg, role: InstrRole) {
        self.push(InstrKind::Mgather { dst, addr }, role);
    }

    pub fn mscatter(&mut self, src: MReg, addr: MReg) {
        self.push(InstrKind::Mscatter { src, addr }, InstrRole::Output);
    }

    pub fn records(&self) -> &[[u64; MATRIX_REG_ROWS]] {
        &self.records
    }

    /// Resolves base-vector load addresses once the record table has a
    /// home in the image, and returns the finished stream.
    pub fn finish(mut self, vec_region_base: u64) -> (Vec<Instruction>, Vec<InstrRole>, Vec<u64>) {
        let mut addrs = Vec::with_capacity(self.records.len());
        for i in 0..self.records.len() {
            addrs.push(vec_region_base + i as u64 * VEC_RECORD_BYTES);
        }
        for (instr, role) in self.instrs.iter_mut().zip(&self.roles) {
            if *role == InstrRole::BaseVector {
                if let InstrKind::Mld { base, .. } = &mut instr.kind {
                    *base = addrs[*base as usize];
                }
            }
        }
        (self.instrs, self.roles, addrs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_replicates_last_lane() {
        let recs = pack_base_vectors(&[0x10, 0x20, 0x30], 16);
        assert_eq!(recs.len(), 1);
        assert_eq!(&recs[0][..3], &[0x10, 0x20, 0x30]);
        assert!(recs[0][3..].iter().all(|&l| l == 0x30));
    }

    #[test]
    fn pack_empty_and_chunking() {
        assert!(pack_base_vectors(&[], 16).is_empty());
        let addrs: Vec<u64> = (0..17).collect();
        let recs = pack_base_vectors(&addrs, 16);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1][0], 16);
        assert!(recs[1][1..].iter().all(|&l| l == 16));
    }

    #[test]
    fn ensure_shape_emits_minimal_mcfgs() {
        let mut b = ProgramBuilder::new();
        b.ensure_shape(Some(16), Some(64), Some(16)).unwrap(); // already the reset shape
        assert!(b.instrs.is_empty());
        b.ensure_shape(Some(4), Some(64), Some(1)).unwrap();
        assert_eq!(b.instrs.len(), 2); // M and N only
        b.ensure_shape(Some(4), None, None).unwrap();
        assert_eq!(b.instrs.len(), 2);
    }
}
