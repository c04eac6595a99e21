//! The cycle-level core: a 2-way-issue out-of-order machine without
//! register renaming, fed non-speculatively from a dispatch stream.
//!
//! Decoded instructions enter the runahead issue queue (RIQ), a circular
//! queue that doubles as the instruction window. Entries issue out of
//! order once they have no RAW/WAW/WAR conflicts with older unfinished
//! instructions and retire in program order from the head. Memory
//! instructions decompose into one demand uop per matrix register row
//! (one row per instruction per cycle) through a load/store unit with
//! bounded LQ/SQ.
//!
//! While entries sit stalled, the runahead side walks the queue
//! oldest-first and issues prefetch uops for rows not yet touched,
//! filtered by the tentative-uop mechanism: only the first uop of an
//! instruction goes out until it is observed to miss (latency above the
//! classifier threshold), after which the rest are granted. For
//! `mgather` entries whose base-address register is produced by an
//! older unexecuted instruction, the dependency management unit walks
//! the queue backward to the producing `mld`, runs that chain early
//! into vector matrix registers (VMR), and prefetches through the
//! loaded lanes; chain uops bypass the filter.
//!
//! Runahead never touches architectural state: prefetches only warm the
//! cache and chain loads only fill VMR entries, so the final output of
//! a timed run is byte-identical to the functional executor under every
//! configuration.

use serde::Serialize;
use std::collections::BTreeMap;
use std::collections::VecDeque;
use thiserror::Error;

use crate::isa::{
    gen_gather_addresses, row_line_addresses, CsrConfig, Instruction, InstrKind, MatrixRegisterFile,
    MReg, Opcode, UopKind, ADDR_MASK, LANE_BYTES,
};
use crate::kernel::{KernelProgram, MemoryImage};
use crate::memsys::{DramConfig, LlcConfig, MemRequest, MemResponse, MemSysError, MemSystem, ReqKind};
use crate::stats::StatLedger;

use super::classifier::{ClassifierConfig, LatencyClassifier, Prediction};
use super::vmr::VmrFile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RfuMode {
    /// Threshold learned online from the latency histogram.
    Dynamic,
    /// Fixed threshold in cycles.
    Static(u64),
    /// No filtering: every prefetch uop is granted.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MachineConfig {
    /// RIQ capacity; None emulates an unbounded queue.
    pub riq_capacity: Option<usize>,
    /// VMR entries; None emulates unbounded capacity.
    pub vmr_entries: Option<usize>,
    pub runahead: bool,
    pub rfu: RfuMode,
    pub issue_width: usize,
    pub dispatch_width: usize,
    /// Prefetch uops forwarded to the LSU per cycle.
    pub prefetch_width: usize,
    pub lq_entries: usize,
    pub sq_entries: usize,
    /// Prefetch and chain uops occupy LQ slots (they contend like
    /// normal requests); unbounded-queue emulation turns this off.
    pub prefetch_occupies_lq: bool,
    /// Feed prefetch/chain uop latencies to the classifier too.
    pub observe_prefetch_latencies: bool,
    pub classifier: ClassifierConfig,
    pub llc: LlcConfig,
    pub dram: DramConfig,
    pub oracle_cache: bool,
    pub mshr_merge: bool,
    pub max_cycles: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            riq_capacity: Some(32),
            vmr_entries: Some(16),
            runahead: true,
            rfu: RfuMode::Dynamic,
            issue_width: 2,
            dispatch_width: 2,
            prefetch_width: 1,
            lq_entries: 48,
            sq_entries: 48,
            prefetch_occupies_lq: true,
            observe_prefetch_latencies: true,
            classifier: ClassifierConfig::default(),
            llc: LlcConfig::default(),
            dram: DramConfig::default(),
            oracle_cache: false,
            mshr_merge: false,
            max_cycles: 500_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum MachineError {
    #[error(transparent)]
    Mem(#[from] MemSysError),
    #[error("cycle limit {0} exceeded")]
    CycleLimit(u64),
    #[error("memory access fault at {addr:#x} (instruction {id})")]
    Fault { id: u64, addr: u64 },
    #[error("machine finished without draining: {0}")]
    Drain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
enum EntryState {
    Waiting,
    Executing,
    Completed,
}

/// Where a gather's runahead addresses come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AddrSource {
    /// Strided instruction: computed from base and stride.
    Strided,
    /// Not yet examined by the DMU.
    Unresolved,
    /// Producer already executed: read the architectural register.
    Arch,
    /// Chained to an in-queue producer's VMR entry.
    Vmr { producer: u64 },
    /// No usable chain (terminates at a non-load); no runahead.
    Unavailable,
}

struct RiqEntry {
    instr: Instruction,
    state: EntryState,
    issue_cycle: Option<u64>,
    complete_cycle: Option<u64>,
    // Demand-side progress.
    demand_row: usize,
    demand_outstanding: usize,
    /// Line footprint for stores, once known (mst: at dispatch,
    /// mscatter: at issue). Loads may not pass an older store whose
    /// footprint is unknown or overlapping.
    store_lines: Option<Vec<u64>>,
    // Runahead side.
    prefetch_row: usize,
    granted: bool,
    tentative_sent: bool,
    addr_source: AddrSource,
    chain_producer: bool,
    vmr_slot: Option<usize>,
    // Audit.
    runahead_uops: usize,
    runahead_lines: usize,
}

impl RiqEntry {
    fn new(instr: Instruction, granted: bool) -> Self {
        let addr_source = match instr.kind {
            InstrKind::Mgather { .. } => AddrSource::Unresolved,
            _ => AddrSource::Strided,
        };
        RiqEntry {
            instr,
            state: EntryState::Waiting,
            issue_cycle: None,
            complete_cycle: None,
            demand_row: 0,
            demand_outstanding: 0,
            store_lines: None,
            prefetch_row: 0,
            granted,
            tentative_sent: false,
            addr_source,
            chain_producer: false,
            vmr_slot: None,
            runahead_uops: 0,
            runahead_lines: 0,
        }
    }

    fn rows(&self) -> usize {
        self.instr.shape.m()
    }
}

/// Per-instruction runahead outcome, kept for property checks.
#[derive(Debug, Clone, Serialize)]
pub struct InstrAudit {
    pub id: u64,
    pub opcode: Opcode,
    pub matrix_m: usize,
    pub reads: u8,
    pub writes: u8,
    pub issue_cycle: Option<u64>,
    pub complete_cycle: Option<u64>,
    pub granted: bool,
    pub chain_producer: bool,
    pub runahead_uops: usize,
    pub runahead_lines: usize,
}

/// Pending-writer/pending-reader sets per register and CSR, mirroring
/// the unfinished instructions in the queue. CSR entries only ever see
/// writers: shapes are consumed at decode, so no instruction reads a
/// CSR at issue time.
#[derive(Default)]
struct Scoreboard {
    writers: [Vec<u64>; 8],
    readers: [Vec<u64>; 8],
    csr_writers: Vec<u64>,
}

impl Scoreboard {
    fn add(&mut self, instr: &Instruction) {
        let (w, r) = (instr.writes(), instr.reads());
        for reg in 0..8 {
            if w & (1 << reg) != 0 {
                self.writers[reg].push(instr.id);
            }
            if r & (1 << reg) != 0 {
                self.readers[reg].push(instr.id);
            }
        }
        if matches!(instr.kind, InstrKind::Mcfg { .. }) {
            self.csr_writers.push(instr.id);
        }
    }

    fn remove(&mut self, instr: &Instruction) {
        let (w, r) = (instr.writes(), instr.reads());
        for reg in 0..8 {
            if w & (1 << reg) != 0 {
                self.writers[reg].retain(|&id| id != instr.id);
            }
            if r & (1 << reg) != 0 {
                self.readers[reg].retain(|&id| id != instr.id);
            }
        }
        if matches!(instr.kind, InstrKind::Mcfg { .. }) {
            self.csr_writers.retain(|&id| id != instr.id);
        }
    }

    /// True when an older unfinished instruction conflicts RAW, WAW or
    /// WAR with `instr`.
    fn blocked(&self, instr: &Instruction) -> bool {
        let (w, r) = (instr.writes(), instr.reads());
        for reg in 0..8 {
            let bit = 1 << reg;
            if r & bit != 0 && self.writers[reg].iter().any(|&id| id < instr.id) {
                return true; // RAW
            }
            if w & bit != 0
                && (self.writers[reg].iter().any(|&id| id < instr.id)
                    || self.readers[reg].iter().any(|&id| id < instr.id))
            {
                return true; // WAW / WAR
            }
        }
        false
    }
}

enum UopDest {
    None,
    LoadRow { reg: MReg, addr: u64, k: usize, row: usize },
    StoreRow { addr: u64, data: Vec<u8> },
    VmrLane { slot: usize, owner: u64, lane: usize, addr: u64, k: usize },
}

struct InflightUop {
    entry_id: u64,
    req_kind: ReqKind,
    uop_kind: UopKind,
    lines_left: usize,
    created: u64,
    dest: UopDest,
    holds_lq: bool,
    holds_sq: bool,
    is_tentative: bool,
}

struct PendingLine {
    uop: u64,
    line: u64,
    kind: ReqKind,
}

struct Lsu {
    lq_used: usize,
    sq_used: usize,
    pending: VecDeque<PendingLine>,
    inflight: BTreeMap<u64, InflightUop>,
}

impl Lsu {
    fn new() -> Self {
        Lsu {
            lq_used: 0,
            sq_used: 0,
            pending: VecDeque::new(),
            inflight: BTreeMap::new(),
        }
    }

    fn is_empty(&self) -> bool {
        self.pending.is_empty() && self.inflight.is_empty()
    }
}

struct SystolicJob {
    entry_id: u64,
    done_at: u64,
    shape: CsrConfig,
}

/// Systolic-array timing: fill + compute + drain over a tile is
/// matrixK + matrixM + matrixN cycles, with matrixM x matrixN PEs
/// active for the duration; the array runs one tile at a time.
pub fn systolic_latency(shape: CsrConfig) -> u64 {
    (shape.k() + shape.m() + shape.n()) as u64
}

pub struct RunOutcome {
    pub cycles: u64,
    pub ledger: StatLedger,
    pub output: Vec<u8>,
    pub audits: Vec<InstrAudit>,
    pub classifier_threshold: Option<u64>,
}

pub struct Machine {
    cfg: MachineConfig,
    cycle: u64,
    program: Vec<Instruction>,
    next_dispatch: usize,
    riq: VecDeque<RiqEntry>,
    regs: MatrixRegisterFile,
    mem: MemoryImage,
    output_region: String,
    scoreboard: Scoreboard,
    vmr: VmrFile,
    classifier: LatencyClassifier,
    lsu: Lsu,
    systolic: Option<SystolicJob>,
    memsys: MemSystem,
    ledger: StatLedger,
    uop_counter: u64,
    audits: Vec<InstrAudit>,
    fault: Option<MachineError>,
}

impl Machine {
    pub fn new(program: &KernelProgram, cfg: MachineConfig) -> Result<Self, MachineError> {
        let memsys = MemSystem::new(cfg.llc, cfg.dram, cfg.oracle_cache, cfg.mshr_merge)?;
        let mut ledger = StatLedger::default();
        ledger.banks = cfg.llc.banks as u64;
        Ok(Machine {
            cfg,
            cycle: 0,
            program: program.instrs.clone(),
            next_dispatch: 0,
            riq: VecDeque::new(),
            regs: MatrixRegisterFile::default(),
            mem: program.image.clone(),
            output_region: program.output.region.clone(),
            scoreboard: Scoreboard::default(),
            vmr: VmrFile::new(cfg.vmr_entries),
            classifier: LatencyClassifier::new(cfg.classifier),
            lsu: Lsu::new(),
            systolic: None,
            memsys,
            ledger,
            uop_counter: 0,
            audits: Vec::new(),
            fault: None,
        })
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn ledger(&self) -> &StatLedger {
        &self.ledger
    }

    pub fn classifier(&self) -> &LatencyClassifier {
        &self.classifier
    }

    fn done(&self) -> bool {
        self.next_dispatch == self.program.len()
            && self.riq.is_empty()
            && self.lsu.is_empty()
            && self.systolic.is_none()
            && self.memsys.is_idle()
    }

    /// Runs to completion and checks the drain invariants.
    pub fn run(mut self) -> Result<RunOutcome, MachineError> {
        while !self.done() {
            self.step()?;
            if self.cycle > self.cfg.max_cycles {
                return Err(MachineError::CycleLimit(self.cfg.max_cycles));
            }
        }
        if self.lsu.lq_used != 0 || self.lsu.sq_used != 0 {
            return Err(MachineError::Drain(format!(
                "LQ/SQ not empty: {}/{}",
                self.lsu.lq_used, self.lsu.sq_used
            )));
        }
        if self.vmr.allocated() != 0 || !self.vmr.conservation_holds() {
            return Err(MachineError::Drain("VMR slots still allocated".into()));
        }
        let output = self
            .mem
            .region_bytes(&self.output_region)
            .expect("output region exists")
            .to_vec();
        Ok(RunOutcome {
            cycles: self.cycle,
            ledger: self.ledger.clone(),
            output,
            audits: self.audits.clone(),
            classifier_threshold: self.classifier.threshold(),
        })
    }

    /// One cycle: memory completions, retire, dispatch, issue, runahead
    /// arbitration + filtering, LSU uop generation and submission, stats.
    pub fn step(&mut self) -> Result<(), MachineError> {
        self.phase_memsys();
        self.phase_retire();
        self.phase_dispatch()?;
        self.phase_issue();
        if self.cfg.runahead {
            self.phase_runahead();
        }
        self.phase_lsu()?;
        self.phase_stats();
        if let Some(err) = self.fault.take() {
            return Err(err);
        }
        self.cycle += 1;
        Ok(())
    }

    fn entry_pos(&self, id: u64) -> Option<usize> {
        self.riq.iter().position(|e| e.instr.id == id)
    }

    fn next_uop_id(&mut self) -> u64 {
        self.uop_counter += 1;
        self.uop_counter
    }

    // ---- phase A: memory + systolic completions ----

    fn phase_memsys(&mut self) {
        let (resps, activity) = self.memsys.tick(self.cycle);
        self.ledger.bank_read_busy_cycles += activity.read_port_busy;
        self.ledger.bank_write_busy_cycles += activity.write_port_busy;
        self.ledger.dram_transfers += activity.dram_transfers;
        self.ledger.energy_llc_access += activity.llc_lookups;
        self.ledger.energy_dram_access += activity.dram_transfers;
        for resp in resps {
            self.handle_response(resp);
        }
        if let Some(job) = &self.systolic {
            if self.cycle >= job.done_at {
                let job = self.systolic.take().unwrap();
                if let Some(pos) = self.entry_pos(job.entry_id) {
                    if let InstrKind::Mma { dst, a, b } = self.riq[pos].instr.kind {
                        self.regs.mma_on_registers(dst, a, b, job.shape);
                    }
                    self.complete_entry(pos);
                }
            }
        }
    }

    fn count_response(&mut self, resp: &MemResponse) {
        let (hits, misses) = match resp.kind {
            ReqKind::DemandLoad => (&mut self.ledger.demand_load_hits, &mut self.ledger.demand_load_misses),
            ReqKind::Store => (&mut self.ledger.store_hits, &mut self.ledger.store_misses),
            ReqKind::Prefetch => (&mut self.ledger.prefetch_hits, &mut self.ledger.prefetch_misses),
            ReqKind::ChainLoad => (&mut self.ledger.chain_hits, &mut self.ledger.chain_misses),
        };
        if resp.hit {
            *hits += 1;
        } else {
            *misses += 1;
        }
        if resp.redundant_prefetch {
            self.ledger.redundant_prefetches += 1;
        }
    }

    fn handle_response(&mut self, resp: MemResponse) {
        self.count_response(&resp);
        let uop = match self.lsu.inflight.get_mut(&resp.uop) {
            Some(u) => u,
            None => return,
        };
        uop.lines_left -= 1;
        if uop.lines_left > 0 {
            return;
        }
        let uop = self.lsu.inflight.remove(&resp.uop).unwrap();
        if uop.holds_lq {
            self.lsu.lq_used -= 1;
        }
        if uop.holds_sq {
            self.lsu.sq_used -= 1;
        }
        let latency = self.cycle.saturating_sub(uop.created);

        match uop.dest {
            UopDest::None => {}
            UopDest::LoadRow { reg, addr, k, row } => {
                match self.mem.read(addr, k) {
                    Some(bytes) => {
                        let data = bytes.to_vec();
                        self.regs.row_mut(reg, row)[..k].copy_from_slice(&data);
                    }
                    None => {
                        self.fault.get_or_insert(MachineError::Fault {
                            id: uop.entry_id,
                            addr,
                        });
                    }
                }
            }
            UopDest::StoreRow { addr, ref data } => {
                if self.mem.write(addr, data).is_none() {
                    self.fault.get_or_insert(MachineError::Fault {
                        id: uop.entry_id,
                        addr,
                    });
                }
            }
            UopDest::VmrLane { slot, owner, lane, addr, k } => {
                if self.vmr.get(slot).map(|e| e.owner) == Some(owner) {
                    let take = k.min(LANE_BYTES);
                    let mut value = 0u64;
                    if let Some(bytes) = self.mem.read(addr, take) {
                        for (i, &b) in bytes.iter().enumerate() {
                            value |= (b as u64) << (8 * i);
                        }
                    }
                    self.vmr.fill_lane(slot, lane, value);
                    self.ledger.energy_vmr_access += 1;
                }
            }
        }

        // Demand bookkeeping and entry completion.
        if uop.uop_kind == UopKind::Demand {
            if resp.kind == ReqKind::DemandLoad {
                self.ledger.demand_latency_sum += latency;
                self.ledger.demand_latency_count += 1;
            }
            if let Some(pos) = self.entry_pos(uop.entry_id) {
                let entry = &mut self.riq[pos];
                entry.demand_outstanding -= 1;
                if entry.demand_row == entry.rows() && entry.demand_outstanding == 0 {
                    self.complete_entry(pos);
                }
            }
        }

        // Hit/miss classification drives granting; the classifier only
        // learns in dynamic mode.
        let is_load_class = !uop.req_kind.is_write();
        if is_load_class {
            let predicted_miss = match self.cfg.rfu {
                RfuMode::Dynamic => self.classifier.predict(latency) == Prediction::Miss,
                RfuMode::Static(t) => latency > t,
                RfuMode::Off => true,
            };
            if uop.is_tentative && predicted_miss {
                if let Some(pos) = self.entry_pos(uop.entry_id) {
                    self.riq[pos].granted = true;
                }
            }
            let observe = match uop.uop_kind {
                UopKind::Demand => true,
                _ => self.cfg.observe_prefetch_latencies,
            };
            if observe && self.cfg.rfu == RfuMode::Dynamic {
                self.classifier.observe(latency);
            }
        }
    }

    fn complete_entry(&mut self, pos: usize) {
        let entry = &mut self.riq[pos];
        entry.state = EntryState::Completed;
        entry.complete_cycle = Some(self.cycle);
        let instr = entry.instr;
        self.scoreboard.remove(&instr);
    }

    /// Warm-starts the latency classifier, e.g. to skip cold-start
    /// transients when constructing targeted scenarios.
    pub fn pretrain_classifier(&mut self, samples: &[u64]) {
        for &s in samples {
            self.classifier.observe(s);
        }
    }

    /// Installs lines into the LLC without timing, for warm-started
    /// scenarios.
    pub fn prewarm_lines(&mut self, lines: &[u64]) {
        for &l in lines {
            self.memsys.prefill(l);
        }
    }

    // ---- phase B: retire in program order ----

    fn phase_retire(&mut self) {
        while let Some(front) = self.riq.front() {
            if front.state != EntryState::Completed {
                break;
            }
            let entry = self.riq.pop_front().unwrap();
            if let Some(slot) = entry.vmr_slot {
                self.vmr.release(slot);
            }
            self.audits.push(InstrAudit {
                id: entry.instr.id,
                opcode: entry.instr.opcode(),
                matrix_m: entry.rows(),
                reads: entry.instr.reads(),
                writes: entry.instr.writes(),
                issue_cycle: entry.issue_cycle,
                complete_cycle: entry.complete_cycle,
                granted: entry.granted,
                chain_producer: entry.chain_producer,
                runahead_uops: entry.runahead_uops,
                runahead_lines: entry.runahead_lines,
            });
            if entry.runahead_uops > 0 && !entry.chain_producer {
                self.ledger.runahead_instr_probed += 1;
                if entry.granted {
                    self.ledger.runahead_instr_granted += 1;
                }
            }
        }
    }

    // ---- phase C: dispatch ----

    fn phase_dispatch(&mut self) -> Result<(), MachineError> {
        let mut dispatched = 0;
        while dispatched < self.cfg.dispatch_width && self.next_dispatch < self.program.len() {
            if let Some(cap) = self.cfg.riq_capacity {
                if self.riq.len() >= cap {
                    self.ledger.dispatch_stall_cycles += 1;
                    break;
                }
            }
            let instr = self.program[self.next_dispatch];
            self.next_dispatch += 1;
            dispatched += 1;
            self.ledger.instructions_dispatched += 1;
            self.ledger.energy_riq_op += 1;
            match instr.opcode() {
                Opcode::Mcfg => self.ledger.mcfg_count += 1,
                Opcode::Mld => self.ledger.mld_count += 1,
                Opcode::Mst => self.ledger.mst_count += 1,
                Opcode::Mma => self.ledger.mma_count += 1,
                Opcode::Mgather => self.ledger.mgather_count += 1,
                Opcode::Mscatter => self.ledger.mscatter_count += 1,
            }
            let granted_at_dispatch = matches!(self.cfg.rfu, RfuMode::Off);
            let mut entry = RiqEntry::new(instr, granted_at_dispatch);
            if let InstrKind::Mst { base, stride, .. } = instr.kind {
                entry.store_lines = Some(Self::strided_lines(base, stride, instr.shape)?);
            }
            self.scoreboard.add(&instr);
            self.riq.push_back(entry);
            // The DMU examines gathers as they enter the queue, so the
            // producing chain is marked before runahead probes it.
            if self.cfg.runahead && matches!(instr.kind, InstrKind::Mgather { .. }) {
                self.resolve_chain(self.riq.len() - 1);
            }
        }
        Ok(())
    }

    fn strided_lines(base: u64, stride: i64, shape: CsrConfig) -> Result<Vec<u64>, MachineError> {
        let addrs = crate::isa::gen_strided_addresses(base, stride, shape.m())
            .map_err(|_| MachineError::Fault { id: 0, addr: base })?;
        let mut lines = Vec::new();
        for addr in addrs {
            lines.extend(row_line_addresses(addr, shape.k()));
        }
        lines.sort_unstable();
        lines.dedup();
        Ok(lines)
    }

    // ---- phase D: issue ----

    fn phase_issue(&mut self) {
        let mut issued = 0;
        for pos in 0..self.riq.len() {
            if issued >= self.cfg.issue_width {
                break;
            }
            let entry = &self.riq[pos];
            if entry.state != EntryState::Waiting {
                continue;
            }
            let instr = entry.instr;
            if self.scoreboard.blocked(&instr) {
                continue;
            }
            match instr.kind {
                InstrKind::Mcfg { .. } => {
                    // Shape already consumed at decode.
                    self.complete_entry(pos);
                }
                InstrKind::Mma { .. } => {
                    if self.systolic.is_some() {
                        continue; // structural hazard: one array
                    }
                    let shape = instr.shape;
                    self.systolic = Some(SystolicJob {
                        entry_id: instr.id,
                        done_at: self.cycle + systolic_latency(shape),
                        shape,
                    });
                    self.ledger.energy_mac_op += (shape.m() * shape.k() * shape.n()) as u64;
                    self.riq[pos].state = EntryState::Executing;
                }
                InstrKind::Mld { .. } | InstrKind::Mst { .. } => {
                    self.riq[pos].state = EntryState::Executing;
                }
                InstrKind::Mgather { dst: _, addr } | InstrKind::Mscatter { src: _, addr } => {
                    // RAW guarantees the base-address register is
                    // architecturally complete here.
                    if instr.is_store() {
                        let lanes = self.regs.lanes48(addr);
                        let addrs = gen_gather_addresses(&lanes, instr.shape.m());
                        let mut lines = Vec::new();
                        for a in addrs {
                            lines.extend(row_line_addresses(a, instr.shape.k()));
                        }
                        lines.sort_unstable();
                        lines.dedup();
                        self.riq[pos].store_lines = Some(lines);
                    }
                    self.riq[pos].state = EntryState::Executing;
                }
            }
            self.riq[pos].issue_cycle = Some(self.cycle);
            issued += 1;
            self.ledger.energy_riq_op += 1;
        }
    }

    // ---- phase E: runahead arbitration + filtering ----

    fn phase_runahead(&mut self) {
        for _ in 0..self.cfg.prefetch_width {
            if !self.runahead_emit_one() {
                break;
            }
        }
    }

    /// Oldest-first scan for one prefetch-side uop. Returns false when
    /// no candidate made progress this cycle.
    fn runahead_emit_one(&mut self) -> bool {
        for pos in 0..self.riq.len() {
            let entry = &self.riq[pos];
            if entry.state != EntryState::Waiting || !entry.instr.is_load() {
                continue;
            }
            if entry.prefetch_row >= entry.rows() {
                continue;
            }
            if entry.addr_source == AddrSource::Unresolved {
                self.resolve_chain(pos);
            }
            let entry = &self.riq[pos];
            if entry.addr_source == AddrSource::Unavailable {
                continue;
            }
            // Тentative filtering; chain producers are always issued.
            if !entry.chain_producer && !entry.granted && entry.tentative_sent {
                continue;
            }
            if self.emit_runahead_uop(pos) {
                return true;
            }
        }
        false
    }

    /// The DMU walk: find the nearest older in-queue writer of the
    /// gather's base register; mark the chain (terminating at an `mld`)
    /// as producers, or fall back to the architectural register / no
    /// runahead.
    fn resolve_chain(&mut self, pos: usize) {
        let addr_reg = match self.riq[pos].instr.addr_source() {
            Some(r) => r,
            None => return,
        };
        let consumer_id = self.riq[pos].instr.id;
        let mut writer_pos = None;
        for p in (0..pos).rev() {
            if self.riq[p].instr.writes() & addr_reg.bit() != 0 {
                writer_pos = Some(p);
                break;
            }
        }
        let resolution = match writer_pos {
            None => AddrSource::Arch,
            Some(p) if self.riq[p].state == EntryState::Completed => AddrSource::Arch,
            Some(p) => match self.riq[p].instr.opcode() {
                Opcode::Mld => {
                    self.mark_chain_producer(p);
                    AddrSource::Vmr {
                        producer: self.riq[p].instr.id,
                    }
                }
                Opcode::Mgather => {
                    // Multi-hop: the producer itself gathers, so resolve
                    // its own source first.
                    if self.riq[p].addr_source == AddrSource::Unresolved {
                        self.resolve_chain(p);
                    }
                    match self.riq[p].addr_source {
                        AddrSource::Unavailable => AddrSource::Unavailable,
                        _ => {
                            self.mark_chain_producer(p);
                            AddrSource::Vmr {
                                producer: self.riq[p].instr.id,
                            }
                        }
                    }
                }
                _ => AddrSource::Unavailable,
            },
        };
        let _ = consumer_id;
        self.riq[pos].addr_source = resolution;
    }

    /// Promotes an entry to chain producer. Rows it may already have
    /// probed as plain prefetches must be re-sent as chain loads so the
    /// VMR entry gets every lane.
    fn mark_chain_producer(&mut self, pos: usize) {
        let e = &mut self.riq[pos];
        if !e.chain_producer {
            e.chain_producer = true;
            e.prefetch_row = 0;
        }
    }

    /// Current base addresses for a gather's runahead rows, if ready.
    fn runahead_lanes(&self, pos: usize) -> Option<Vec<u64>> {
        let entry = &self.riq[pos];
        let addr_reg = entry.instr.addr_source()?;
        match entry.addr_source {
            AddrSource::Arch => Some(self.regs.lanes48(addr_reg).to_vec()),
            AddrSource::Vmr { producer } => match self.entry_pos(producer) {
                // Producer gone or architecturally done: register is valid.
                None => Some(self.regs.lanes48(addr_reg).to_vec()),
                Some(p) if self.riq[p].state == EntryState::Completed => {
                    Some(self.regs.lanes48(addr_reg).to_vec())
                }
                Some(p) => {
                    let slot = self.riq[p].vmr_slot?;
                    let e = self.vmr.get(slot)?;
                    if e.ready() {
                        Some(e.lanes.to_vec())
                    } else {
                        None
                    }
                }
            },
            _ => None,
        }
    }

    fn emit_runahead_uop(&mut self, pos: usize) -> bool {
        let entry = &self.riq[pos];
        let instr = entry.instr;
        let row = entry.prefetch_row;
        let shape = instr.shape;
        let is_chain = entry.chain_producer;

        // Chain producers load lanes into a VMR entry; allocate it on
        // first use (this is the grant point for chain instructions).
        if is_chain && entry.vmr_slot.is_none() {
            match self.vmr.alloc(instr.id, shape.m()) {
                Some(slot) => {
                    let e = &mut self.riq[pos];
                    e.vmr_slot = Some(slot);
                    e.granted = true;
                    self.ledger.energy_vmr_access += 1;
                }
                None => return false, // free list empty: the wake stalls
            }
        }

        let addr = match instr.kind {
            InstrKind::Mld { base, stride, .. } => {
                let a = base as i128 + row as i128 * stride as i128;
                if a < 0 || a > ADDR_MASK as i128 {
                    self.riq[pos].prefetch_row = shape.m(); // give up on faulty addresses
                    return false;
                }
                a as u64
            }
            InstrKind::Mgather { .. } => {
                let lanes = match self.runahead_lanes(pos) {
                    Some(l) => l,
                    None => return false, // source lanes not ready yet
                };
                if matches!(self.riq[pos].addr_source, AddrSource::Vmr { .. }) {
                    self.ledger.energy_vmr_access += 1;
                }
                lanes[row] & ADDR_MASK
            }
            _ => return false,
        };

        let (uop_kind, req_kind, is_tentative) = if is_chain {
            (UopKind::ChainLoad, ReqKind::ChainLoad, false)
        } else if !self.riq[pos].granted && !self.riq[pos].tentative_sent {
            (UopKind::TentativePrefetch, ReqKind::Prefetch, true)
        } else {
            (UopKind::Prefetch, ReqKind::Prefetch, false)
        };

        let holds_lq = self.cfg.prefetch_occupies_lq;
        if holds_lq && self.lsu.lq_used >= self.cfg.lq_entries {
            return false;
        }

        let k = shape.k();
        let lines = row_line_addresses(addr, k);
        let dest = if is_chain {
            UopDest::VmrLane {
                slot: self.riq[pos].vmr_slot.unwrap(),
                owner: instr.id,
                lane: row,
                addr,
                k,
            }
        } else {
            UopDest::None
        };

        let uop_id = self.next_uop_id();
        if holds_lq {
            self.lsu.lq_used += 1;
        }
        for &line in &lines {
            self.lsu.pending.push_back(PendingLine {
                uop: uop_id,
                line,
                kind: req_kind,
            });
        }
        self.lsu.inflight.insert(
            uop_id,
            InflightUop {
                entry_id: instr.id,
                req_kind,
                uop_kind,
                lines_left: lines.len(),
                created: self.cycle,
                dest,
                holds_lq,
                holds_sq: false,
                is_tentative,
            },
        );

        let entry = &mut self.riq[pos];
        entry.prefetch_row += 1;
        entry.runahead_uops += 1;
        entry.runahead_lines += lines.len();
        if is_tentative {
            entry.tentative_sent = true;
        }
        if is_chain {
            self.ledger.chain_uops_sent += 1;
        } else {
            self.ledger.runahead_uops_sent += 1;
        }
        self.ledger.energy_riq_op += 1;

        // A consumer that has generated all its uops is done reading its
        // producer's VMR entry; release it.
        let finished = self.riq[pos].prefetch_row == shape.m();
        if finished {
            if let AddrSource::Vmr { producer } = self.riq[pos].addr_source {
                if let Some(p) = self.entry_pos(producer) {
                    if let Some(slot) = self.riq[p].vmr_slot.take() {
                        self.vmr.release(slot);
                    }
                }
            }
        }
        true
    }

    // ---- phase F: LSU uop generation and submission ----

    /// A demand load may not pass an older unfinished store whose line
    /// footprint is unknown or overlaps.
    fn load_blocked_by_store(&self, pos: usize, lines: &[u64]) -> bool {
        for p in 0..pos {
            let older = &self.riq[p];
            if !older.instr.is_store() || older.state == EntryState::Completed {
                continue;
            }
            match &older.store_lines {
                None => return true,
                Some(sl) => {
                    if lines.iter().any(|l| sl.binary_search(l).is_ok()) {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn phase_lsu(&mut self) -> Result<(), MachineError> {
        // Demand uop generation: one row per executing memory
        // instruction per cycle, oldest first.
        for pos in 0..self.riq.len() {
            let entry = &self.riq[pos];
            if entry.state != EntryState::Executing || !entry.instr.is_mem() {
                continue;
            }
            if entry.demand_row >= entry.rows() {
                continue;
            }
            let instr = entry.instr;
            let shape = instr.shape;
            let row = entry.demand_row;
            let is_store = instr.is_store();

            if is_store {
                // Stores drain strictly at the head: non-speculative and
                // naturally ordered behind every older access.
                if pos != 0 || self.lsu.sq_used >= self.cfg.sq_entries {
                    continue;
                }
            } else if self.lsu.lq_used >= self.cfg.lq_entries {
                continue;
            }

            let addr = match instr.kind {
                InstrKind::Mld { base, stride, .. } | InstrKind::Mst { base, stride, .. } => {
                    let a = base as i128 + row as i128 * stride as i128;
                    if a < 0 || a > ADDR_MASK as i128 {
                        return Err(MachineError::Fault {
                            id: instr.id,
                            addr: base,
                        });
                    }
                    a as u64
                }
                InstrKind::Mgather { addr, .. } | InstrKind::Mscatter { addr, .. } => {
                    self.regs.lane48(addr, row) & ADDR_MASK
                }
                _ => continue,
            };
            let k = shape.k();
            let lines = row_line_addresses(addr, k);

            if !is_store && self.load_blocked_by_store(pos, &lines) {
                continue;
            }

            let (req_kind, dest, holds_lq, holds_sq) = if is_store {
                let data = {
                    let src = match instr.kind {
                        InstrKind::Mst { src, .. } | InstrKind::Mscatter { src, .. } => src,
                        _ => unreachable!(),
                    };
                    self.regs.row(src, row)[..k].to_vec()
                };
                (ReqKind::Store, UopDest::StoreRow { addr, data }, false, true)
            } else {
                let dst = match instr.kind {
                    InstrKind::Mld { dst, .. } | InstrKind::Mgather { dst, .. } => dst,
                    _ => unreachable!(),
                };
                (
                    ReqKind::DemandLoad,
                    UopDest::LoadRow { reg: dst, addr, k, row },
                    true,
                    false,
                )
            };

            let uop_id = self.next_uop_id();
            if holds_lq {
                self.lsu.lq_used += 1;
            }
            if holds_sq {
                self.lsu.sq_used += 1;
            }
            for &line in &lines {
                self.lsu.pending.push_back(PendingLine {
                    uop: uop_id,
                    line,
                    kind: req_kind,
                });
            }
            self.lsu.inflight.insert(
                uop_id,
                InflightUop {
                    entry_id: instr.id,
                    req_kind,
                    uop_kind: UopKind::Demand,
                    lines_left: lines.len(),
                    created: self.cycle,
                    dest,
                    holds_lq,
                    holds_sq,
                    is_tentative: false,
                },
            );
            let entry = &mut self.riq[pos];
            entry.demand_row += 1;
            entry.demand_outstanding += 1;
        }

        // Submit pending lines; bank-queue-full lines retry next cycle.
        let mut still_pending = VecDeque::new();
        while let Some(p) = self.lsu.pending.pop_front() {
            let req = MemRequest {
                line: p.line,
                kind: p.kind,
                uop: p.uop,
            };
            match self.memsys.submit(req, self.cycle) {
                Ok(()) => {
                    match p.kind {
                        ReqKind::DemandLoad => self.ledger.demand_load_requests += 1,
                        ReqKind::Store => self.ledger.store_requests += 1,
                        ReqKind::Prefetch => self.ledger.prefetch_requests += 1,
                        ReqKind::ChainLoad => self.ledger.chain_requests += 1,
                    }
                }
                Err(_) => still_pending.push_back(p),
            }
        }
        self.lsu.pending = still_pending;
        Ok(())
    }

    // ---- phase G: stats ----

    fn phase_stats(&mut self) {
        self.ledger.cycles += 1;
        if let Some(job) = &self.systolic {
            self.ledger.systolic_busy_cycles += 1;
            self.ledger.active_pe_cycles += (job.shape.m() * job.shape.n()) as u64;
        }
        debug_assert!(self.vmr.conservation_holds());
    }

    /// Debug snapshot: RIQ contents, VMR free list, classifier state.
    pub fn snapshot(&self) -> serde_json::Value {
        let riq: Vec<serde_json::Value> = self
            .riq
            .iter()
            .map(|e| {
                serde_json::json!({
                    "id": e.instr.id,
                    "opcode": format!("{:?}", e.instr.opcode()),
                    "state": format!("{:?}", e.state),
                    "granted": e.granted,
                    "tentative_sent": e.tentative_sent,
                    "decompose_counter": e.prefetch_row,
                    "chain_producer": e.chain_producer,
                    "vmr_slot": e.vmr_slot,
                })
            })
            .collect();
        serde_json::json!({
            "cycle": self.cycle,
            "riq": riq,
            "vmr_free": self.vmr.free_len(),
            "classifier": {
                "histogram": self.classifier.histogram(),
                "threshold": self.classifier.threshold(),
            },
        })
    }
}
