//! Timing-free golden executor: runs a program's instruction stream in
//! dispatch order over a copy of its image and returns the output
//! region. The cycle-level machine must produce architecturally
//! identical results under every configuration.

use crate::isa::{
    gen_gather_addresses, gen_strided_addresses, InstrKind, MatrixRegisterFile, MReg,
};

use super::{KernelError, KernelProgram, MemoryImage};

fn load_rows(
    mem: &MemoryImage,
    regs: &mut MatrixRegisterFile,
    dst: MReg,
    addrs: &[u64],
    k: usize,
    id: u64,
) -> Result<(), KernelError> {
    for (row, &addr) in addrs.iter().enumerate() {
        let bytes = mem
            .read(addr, k)
            .ok_or(KernelError::Fault { id, addr })?
            .to_vec();
        regs.row_mut(dst, row)[..k].copy_from_slice(&bytes);
    }
    Ok(())
}

fn store_rows(
    mem: &mut MemoryImage,
    regs: &MatrixRegisterFile,
    src: MReg,
    addrs: &[u64],
    k: usize,
    id: u64,
) -> Result<(), KernelError> {
    for (row, &addr) in addrs.iter().enumerate() {
        let bytes = regs.row(src, row)[..k].to_vec();
        mem.write(addr, &bytes)
            .ok_or(KernelError::Fault { id, addr })?;
    }
    Ok(())
}

/// Executes the stream and returns the bytes of the output region.
pub fn functional_run(program: &KernelProgram) -> Result<Vec<u8>, KernelError> {
    let mut mem = program.image.clone();
    let mut regs = MatrixRegisterFile::default();
    for instr in &program.instrs {
        let shape = instr.shape;
        match instr.kind {
            // Shape effects were snapshotted at decode; nothing to do at
            // execution time.
            InstrKind::Mcfg { .. } => {}
            InstrKind::Mld { dst, base, stride } => {
                let addrs = gen_strided_addresses(base, stride, shape.m())?;
                load_rows(&mem, &mut regs, dst, &addrs, shape.k(), instr.id)?;
            }
            InstrKind::Mst { src, base, stride } => {
                let addrs = gen_strided_addresses(base, stride, shape.m())?;
                store_rows(&mut mem, &regs, src, &addrs, shape.k(), instr.id)?;
            }
            InstrKind::Mma { dst, a, b } => {
                regs.mma_on_registers(dst, a, b, shape);
            }
            InstrKind::Mgather { dst, addr } => {
                let addrs = gen_gather_addresses(&regs.lanes48(addr), shape.m());
                load_rows(&mem, &mut regs, dst, &addrs, shape.k(), instr.id)?;
            }
            InstrKind::Mscatter { src, addr } => {
                let addrs = gen_gather_addresses(&regs.lanes48(addr), shape.m());
                store_rows(&mut mem, &regs, src, &addrs, shape.k(), instr.id)?;
            }
        }
    }
    mem.region_bytes(&program.output.region)
        .map(|b| b.to_vec())
        .ok_or(KernelError::Fault { id: 0, addr: 0 })
}
