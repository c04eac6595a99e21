//! Reproducible experiment driving: a single run goes matrix ->
//! blockify -> kernel generation -> timed simulation -> architectural
//! verification against the functional executor -> report. Sweeps rerun
//! one axis over a shared base config; variant selection compares
//! filtered-runahead against the full design per block size.

use serde::{Deserialize, Serialize};
use std::io::BufReader;
use std::path::PathBuf;
use thiserror::Error;

use crate::isa::CsrConfig;
use crate::kernel::{functional_run, gen_sddmm, gen_spmm, KernelError, KernelProgram, KernelVariant};
use crate::memsys::{DramConfig, LlcConfig};
use crate::mpu::{InstrAudit, Machine, MachineConfig, MachineError, RfuMode};
use crate::sparse::{
    blockify, read_matrix_market, synth_dense, synth_sparse, BlockifySpec, CscMatrix,
    MatrixMarketError, SparseError,
};
use crate::stats::Report;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    MatrixMarket(#[from] MatrixMarketError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("io: {0}")]
    Io(String),
    #[error("architectural verification failed: {mismatches} of {total} output bytes differ (first at {first})")]
    VerificationFailed {
        mismatches: usize,
        total: usize,
        first: usize,
    },
    #[error("sweep point {axis}={value} failed: {source}")]
    SweepFailed {
        axis: String,
        value: String,
        source: Box<HarnessError>,
    },
    #[error("missing {variant:?} report for block size {block}")]
    MissingVariant { block: usize, variant: Variant },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Spmm,
    Sddmm,
}

/// Ablation points: the plain machine, filtered runahead only, the
/// densifying ISA only, both, unfiltered-unbounded runahead emulation,
/// and the perfect-cache bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Fre,
    Gsa,
    Full,
    Nvr,
    Oracle,
}

impl Variant {
    pub fn kernel_variant(self) -> KernelVariant {
        match self {
            Variant::Gsa | Variant::Full => KernelVariant::Gsa,
            _ => KernelVariant::Baseline,
        }
    }

    pub fn has_runahead(self) -> bool {
        matches!(self, Variant::Fre | Variant::Full | Variant::Nvr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixSource {
    Synthetic {
        rows: usize,
        cols: usize,
        sparsity: f64,
        seed: u64,
    },
    MatrixMarket {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RfuSetting {
    Dynamic,
    Off,
    Static(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlcOverrides {
    pub capacity_bytes: Option<u64>,
    pub associativity: Option<usize>,
    pub banks: Option<usize>,
    pub hit_latency: Option<u64>,
    pub bank_queue_depth: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramOverrides {
    pub latency: Option<u64>,
    pub bytes_per_cycle: Option<u64>,
}

fn default_dense_dim() -> usize {
    64
}

fn default_dense_seed() -> u64 {
    1
}

fn default_block() -> usize {
    1
}

/// One experiment. For SDDMM the matrix is the output mask and
/// `dense_dim` is the contraction depth K; for SpMM the matrix is the
/// sparse operand and `dense_dim` is the dense operand's column count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kernel: Kernel,
    pub variant: Variant,
    pub matrix: MatrixSource,
    #[serde(default = "default_dense_dim")]
    pub dense_dim: usize,
    #[serde(default = "default_dense_seed")]
    pub dense_seed: u64,
    #[serde(default = "default_block")]
    pub block: usize,
    #[serde(default)]
    pub riq: Option<usize>,
    #[serde(default)]
    pub vmr: Option<usize>,
    #[serde(default)]
    pub rfu: Option<RfuSetting>,
    #[serde(default)]
    pub llc: Option<LlcOverrides>,
    #[serde(default)]
    pub dram: Option<DramOverrides>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.dense_dim == 0 {
            return Err(HarnessError::Usage("dense_dim must be at least 1".into()));
        }
        BlockifySpec::new(self.block)
            .map_err(|e| HarnessError::Usage(format!("block: {e}")))?;
        if !self.variant.has_runahead() {
            if self.rfu.is_some() {
                return Err(HarnessError::Usage(format!(
                    "variant {:?} has no runahead filter; the rfu setting contradicts it",
                    self.variant
                )));
            }
            if self.riq.is_some() || self.vmr.is_some() {
                return Err(HarnessError::Usage(format!(
                    "variant {:?} has no runahead queueing; riq/vmr settings contradict it",
                    self.variant
                )));
            }
        }
        if self.variant == Variant::Nvr && self.rfu.is_some() {
            return Err(HarnessError::Usage(
                "the unfiltered-runahead emulation has no filter; rfu contradicts it".into(),
            ));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        match self.matrix {
            MatrixSource::Synthetic { seed, .. } => seed,
            MatrixSource::MatrixMarket { .. } => self.dense_seed,
        }
    }

    fn llc_config(&self) -> LlcConfig {
        let mut llc = LlcConfig::default();
        if let Some(o) = &self.llc {
            if let Some(v) = o.capacity_bytes {
                llc.capacity_bytes = v;
            }
            if let Some(v) = o.associativity {
                llc.associativity = v;
            }
            if let Some(v) = o.banks {
                llc.banks = v;
            }
            if let Some(v) = o.hit_latency {
                llc.hit_latency = v;
            }
            if let Some(v) = o.bank_queue_depth {
                llc.bank_queue_depth = v;
            }
        }
        llc
    }

    fn dram_config(&self) -> DramConfig {
        let mut dram = DramConfig::default();
        if let Some(o) = &self.dram {
            if let Some(v) = o.latency {
                dram.latency = v;
            }
            if let Some(v) = o.bytes_per_cycle {
                dram.bytes_per_cycle = v;
            }
        }
        dram
    }

    /// Machine configuration this experiment runs under. The
    /// unbounded-emulation variant ignores riq/vmr sizes (treated as
    /// infinite) and drops the filter.
    pub fn machine_config(&self) -> MachineConfig {
        let mut cfg = MachineConfig {
            llc: self.llc_config(),
            dram: self.dram_config(),
            ..Default::default()
        };
        if let Some(r) = self.riq {
            cfg.riq_capacity = Some(r);
        }
        if let Some(v) = self.vmr {
            cfg.vmr_entries = Some(v);
        }
        match self.variant {
            Variant::Baseline | Variant::Gsa => {
                cfg.runahead = false;
            }
            Variant::Oracle => {
                cfg.runahead = false;
                cfg.oracle_cache = true;
            }
            Variant::Fre | Variant::Full => {
                cfg.runahead = true;
                cfg.rfu = match self.rfu.unwrap_or(RfuSetting::Dynamic) {
                    RfuSetting::Dynamic => RfuMode::Dynamic,
                    RfuSetting::Static(t) => RfuMode::Static(t),
                    RfuSetting::Off => RfuMode::Off,
                };
            }
            Variant::Nvr => {
                cfg.runahead = true;
                cfg.rfu = RfuMode::Off;
                cfg.riq_capacity = None;
                cfg.vmr_entries = None;
                cfg.prefetch_occupies_lq = false;
            }
        }
        cfg
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Builds the (blockified) sparse matrix this experiment runs over.
pub fn build_matrix(cfg: &ExperimentConfig) -> Result<CscMatrix, HarnessError> {
    let m = match &cfg.matrix {
        MatrixSource::Synthetic {
            rows,
            cols,
            sparsity,
            seed,
        } => synth_sparse(*rows, *cols, *sparsity, *seed)?,
        MatrixSource::MatrixMarket { path } => {
            let file = std::fs::File::open(path).map_err(|e| HarnessError::Io(e.to_string()))?;
            read_matrix_market(BufReader::new(file))?
        }
    };
    Ok(blockify(&m, BlockifySpec::new(cfg.block)?))
}

/// Generates the kernel program for this experiment.
pub fn build_program(cfg: &ExperimentConfig) -> Result<KernelProgram, HarnessError> {
    let matrix = build_matrix(cfg)?;
    let caps = CsrConfig::default();
    let program = match cfg.kernel {
        Kernel::Sddmm => {
            let k = cfg.dense_dim;
            let a = synth_dense(matrix.rows(), k, cfg.dense_seed);
            let b = synth_dense(k, matrix.cols(), cfg.dense_seed.wrapping_add(1));
            gen_sddmm(&matrix, &a, &b, k, cfg.variant.kernel_variant(), caps)?
        }
        Kernel::Spmm => {
            let n = cfg.dense_dim;
            let b = synth_dense(matrix.cols(), n, cfg.dense_seed);
            gen_spmm(&matrix, &b, n, cfg.variant.kernel_variant(), caps)?
        }
    };
    Ok(program)
}

pub struct RunResult {
    pub report: Report,
    pub cycles: u64,
    pub audits: Vec<InstrAudit>,
}

/// Runs one experiment end to end, verifying that the timed machine's
/// architectural output matches the functional executor byte-for-byte.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let program = build_program(cfg)?;
    let golden = functional_run(&program)?;
    let machine = Machine::new(&program, cfg.machine_config())?;
    let outcome = machine.run()?;
    if outcome.output != golden {
        let total = golden.len();
        let mut mismatches = 0;
        let mut first = 0;
        for (i, (a, b)) in outcome.output.iter().zip(&golden).enumerate() {
            if a != b {
                if mismatches == 0 {
                    first = i;
                }
                mismatches += 1;
            }
        }
        return Err(HarnessError::VerificationFailed {
            mismatches,
            total,
            first,
        });
    }
    let report = Report::new(cfg.to_json_value(), cfg.seed(), outcome.ledger);
    Ok(RunResult {
        report,
        cycles: outcome.cycles,
        audits: outcome.audits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: serde_json::Value,
    pub cycles: u64,
    pub report: Report,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub axis: String,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    /// Cycle counts min-max normalized to [0, 1]; all zeros when the
    /// sweep is flat.
    pub fn normalized_cycles(&self) -> Vec<f64> {
        let cycles: Vec<f64> = self.points.iter().map(|p| p.cycles as f64).collect();
        let min = cycles.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = cycles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return vec![0.0; cycles.len()];
        }
        cycles.iter().map(|c| (c - min) / (max - min)).collect()
    }
}

fn apply_axis(
    base: &ExperimentConfig,
    axis: &str,
    value: &serde_json::Value,
) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = base.clone();
    let as_usize = || -> Result<usize, HarnessError> {
        value
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| HarnessError::Usage(format!("axis {axis} needs an integer, got {value}")))
    };
    let as_u64 = || -> Result<u64, HarnessError> {
        value
            .as_u64()
            .ok_or_else(|| HarnessError::Usage(format!("axis {axis} needs an integer, got {value}")))
    };
    match axis {
        "riq" => cfg.riq = Some(as_usize()?),
        "vmr" => cfg.vmr = Some(as_usize()?),
        "block" => cfg.block = as_usize()?,
        "dense_dim" => cfg.dense_dim = as_usize()?,
        "sparsity" => {
            let v = value.as_f64().ok_or_else(|| {
                HarnessError::Usage(format!("axis sparsity needs a number, got {value}"))
            })?;
            match &mut cfg.matrix {
                MatrixSource::Synthetic { sparsity, .. } => *sparsity = v,
                _ => {
                    return Err(HarnessError::Usage(
                        "sparsity sweeps need a synthetic matrix source".into(),
                    ))
                }
            }
        }
        "seed" => match &mut cfg.matrix {
            MatrixSource::Synthetic { seed, .. } => *seed = as_u64()?,
            _ => {
                return Err(HarnessError::Usage(
                    "seed sweeps need a synthetic matrix source".into(),
                ))
            }
        },
        "llc_hit_latency" => {
            let mut o = cfg.llc.unwrap_or_default();
            o.hit_latency = Some(as_u64()?);
            cfg.llc = Some(o);
        }
        "llc_capacity" => {
            let mut o = cfg.llc.unwrap_or_default();
            o.capacity_bytes = Some(as_u64()?);
            cfg.llc = Some(o);
        }
        "dram_latency" => {
            let mut o = cfg.dram.unwrap_or_default();
            o.latency = Some(as_u64()?);
            cfg.dram = Some(o);
        }
        "dram_bandwidth" => {
            let mut o = cfg.dram.unwrap_or_default();
            o.bytes_per_cycle = Some(as_u64()?);
            cfg.dram = Some(o);
        }
        other => {
            return Err(HarnessError::Usage(format!(
                "unknown sweep axis '{other}'"
            )))
        }
    }
    Ok(cfg)
}

/// One run per axis value over a shared base config and seed. A failing
/// point aborts the sweep; `on_point` has already seen every completed
/// point, so partial results survive with the caller.
pub fn sweep(
    spec: &SweepSpec,
    mut on_point: impl FnMut(&SweepPoint),
) -> Result<SweepTable, HarnessError> {
    if spec.values.len() < 2 {
        return Err(HarnessError::Usage(
            "a sweep needs at least two axis values".into(),
        ));
    }
    let mut table = SweepTable {
        axis: spec.axis.clone(),
        points: Vec::new(),
    };
    for value in &spec.values {
        let cfg = apply_axis(&spec.base, &spec.axis, value)?;
        let result = run(&cfg).map_err(|e| HarnessError::SweepFailed {
            axis: spec.axis.clone(),
            value: value.to_string(),
            source: Box::new(e),
        })?;
        let point = SweepPoint {
            value: value.clone(),
            cycles: result.cycles,
            report: result.report,
        };
        on_point(&point);
        table.points.push(point);
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize)]
pub struct ChoiceRow {
    pub block: usize,
    pub fre_cycles: u64,
    pub full_cycles: u64,
    pub recommend: Variant,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChoiceTable {
    pub rows: Vec<ChoiceRow>,
    /// Smallest block size at which the filtered-runahead-only variant
    /// takes over from the full design; None when the full design wins
    /// everywhere.
    pub crossover_block: Option<usize>,
}

/// Offline profiling rule: per block size, recommend the cheaper of FRE
/// and FULL (ties prefer FRE, which skips the gather overhead).
pub fn choose_variant(reports: &[Report]) -> Result<ChoiceTable, HarnessError> {
    use std::collections::BTreeMap;
    let mut by_block: BTreeMap<usize, (Option<u64>, Option<u64>)> = BTreeMap::new();
    for r in reports {
        let cfg: ExperimentConfig = serde_json::from_value(r.config.clone())
            .map_err(|e| HarnessError::Usage(format!("report carries a bad config: {e}")))?;
        let slot = by_block.entry(cfg.block).or_default();
        match cfg.variant {
            Variant::Fre => slot.0 = Some(r.ledger.cycles),
            Variant::Full => slot.1 = Some(r.ledger.cycles),
            _ => {}
        }
    }
    let mut rows = Vec::new();
    for (block, (fre, full)) in by_block {
        let fre = fre.ok_or(HarnessError::MissingVariant {
            block,
            variant: Variant::Fre,
        })?;
        let full = full.ok_or(HarnessError::MissingVariant {
            block,
            variant: Variant::Full,
        })?;
        let recommend = if full < fre { Variant::Full } else { Variant::Fre };
        rows.push(ChoiceRow {
            block,
            fre_cycles: fre,
            full_cycles: full,
            recommend,
        });
    }
    if rows.is_empty() {
        return Err(HarnessError::Usage("no FRE/FULL report pairs found".into()));
    }
    let crossover_block = rows
        .iter()
        .find(|r| r.recommend == Variant::Fre)
        .map(|r| r.block);
    Ok(ChoiceTable {
        rows,
        crossover_block,
    })
}
