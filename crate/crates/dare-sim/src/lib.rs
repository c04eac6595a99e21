//! Cycle-level model of DARE, a matrix processing unit that tolerates
//! sparse-workload irregularity two ways: a gather/scatter ISA extension
//! (GSA) that densifies scattered tile rows into full matrix operations,
//! and filtered runahead execution (FRE) that prefetches for stalled
//! memory instructions while suppressing redundant prefetches with a
//! latency-threshold classifier.
//!
//! The crate is organized along the machine boundary:
//!
//! - [`isa`]: instruction forms, shape CSRs, the matrix register file,
//!   address generation, and timing-free MMA semantics.
//! - [`sparse`]: CSC matrices, blockification, seeded synthesis, and
//!   Matrix Market ingestion.
//! - [`kernel`]: lowering of SpMM and SDDMM to instruction streams plus
//!   a memory image, in strided-baseline and GSA variants, and a
//!   functional (golden) executor.
//! - [`memsys`]: banked set-associative LLC and latency/bandwidth-limited
//!   main memory, with prefetch redundancy accounting.
//! - [`mpu`]: the cycle-level core: dispatch, runahead issue queue,
//!   vector matrix registers, the runahead filter and its classifier,
//!   load/store unit, scoreboard, and systolic-array timing.
//! - [`stats`]: the metric ledger and report serialization.
//! - [`harness`]: reproducible experiment driving (runs, sweeps, variant
//!   selection).

pub mod harness;
pub mod isa;
pub mod kernel;
pub mod memsys;
pub mod mpu;
pub mod sparse;
pub mod stats;
