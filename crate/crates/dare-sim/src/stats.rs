//! Metric collection and reporting.
//!
//! A [`StatLedger`] is a pure fold over the simulation's event stream:
//! every field is a monotone counter bumped as events happen, and all
//! ratios are derived on demand. Reports serialize to JSON or CSV with
//! stable field names and ordering, embedding the resolved config and
//! seed so any report can be reproduced from itself.
//!
//! Energy is reported only as dimensionless event-count proxies
//! (weighted sums of LLC accesses, DRAM transfers, MAC operations, VMR
//! accesses and issue-queue operations) — never as joules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("negative energy weight for {0}")]
    NegativeWeight(&'static str),
}

pub const TOTAL_PES: u64 = 256; // 16 x 16 systolic array

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatLedger {
    pub cycles: u64,

    // Line-granular cache traffic by request kind.
    pub demand_load_requests: u64,
    pub demand_load_hits: u64,
    pub demand_load_misses: u64,
    pub store_requests: u64,
    pub store_hits: u64,
    pub store_misses: u64,
    pub prefetch_requests: u64,
    pub prefetch_hits: u64,
    pub prefetch_misses: u64,
    pub chain_requests: u64,
    pub chain_hits: u64,
    pub chain_misses: u64,
    pub redundant_prefetches: u64,

    // Bank port activity and DRAM traffic.
    pub banks: u64,
    pub bank_read_busy_cycles: u64,
    pub bank_write_busy_cycles: u64,
    pub dram_transfers: u64,

    // Demand load uop latencies.
    pub demand_latency_sum: u64,
    pub demand_latency_count: u64,

    // Systolic array occupancy.
    pub active_pe_cycles: u64,
    pub systolic_busy_cycles: u64,

    // Instruction mix.
    pub instructions_dispatched: u64,
    pub mcfg_count: u64,
    pub mld_count: u64,
    pub mst_count: u64,
    pub mma_count: u64,
    pub mgather_count: u64,
    pub mscatter_count: u64,

    // Runahead accounting (uops and per-instruction outcomes).
    pub runahead_uops_sent: u64,
    pub chain_uops_sent: u64,
    pub runahead_instr_probed: u64,
    pub runahead_instr_granted: u64,

    // Dispatch stalls from a full issue queue.
    pub dispatch_stall_cycles: u64,

    // Energy-event counters.
    pub energy_llc_access: u64,
    pub energy_dram_access: u64,
    pub energy_mac_op: u64,
    pub energy_vmr_access: u64,
    pub energy_riq_op: u64,
}

impl StatLedger {
    pub fn lookups(&self) -> u64 {
        self.demand_load_requests + self.store_requests + self.prefetch_requests + self.chain_requests
    }

    pub fn misses(&self) -> u64 {
        self.demand_load_misses + self.store_misses + self.prefetch_misses + self.chain_misses
    }

    /// Miss fraction over all cache lookups.
    pub fn miss_rate(&self) -> Result<f64, StatsError> {
        let lookups = self.lookups();
        if lookups == 0 {
            return Err(StatsError::Undefined("miss_rate with no lookups"));
        }
        Ok(self.misses() as f64 / lookups as f64)
    }

    /// Miss fraction over demand loads only.
    pub fn demand_miss_rate(&self) -> Result<f64, StatsError> {
        if self.demand_load_requests == 0 {
            return Err(StatsError::Undefined("demand_miss_rate with no demand loads"));
        }
        Ok(self.demand_load_misses as f64 / self.demand_load_requests as f64)
    }

    /// Active PEs over the whole run divided by total PE capacity.
    pub fn pe_utilization(&self) -> Result<f64, StatsError> {
        if self.cycles == 0 {
            return Err(StatsError::Undefined("pe_utilization of a zero-cycle run"));
        }
        Ok(self.active_pe_cycles as f64 / (TOTAL_PES * self.cycles) as f64)
    }

    /// Redundant prefetch lines over issued prefetch lines.
    pub fn redundancy_rate(&self) -> Result<f64, StatsError> {
        if self.prefetch_requests == 0 {
            return Err(StatsError::Undefined("redundancy_rate with no prefetches"));
        }
        Ok(self.redundant_prefetches as f64 / self.prefetch_requests as f64)
    }

    /// Mean demand-load uop latency in cycles.
    pub fn avg_demand_latency(&self) -> Result<f64, StatsError> {
        if self.demand_latency_count == 0 {
            return Err(StatsError::Undefined("avg_demand_latency with no demand completions"));
        }
        Ok(self.demand_latency_sum as f64 / self.demand_latency_count as f64)
    }

    /// Busy fraction of all bank ports (one read and one write port per
    /// bank per cycle).
    pub fn bandwidth_occupancy(&self) -> Result<f64, StatsError> {
        if self.cycles == 0 || self.banks == 0 {
            return Err(StatsError::Undefined("bandwidth_occupancy of a zero-cycle run"));
        }
        let ports = 2 * self.banks * self.cycles;
        Ok((self.bank_read_busy_cycles + self.bank_write_busy_cycles) as f64 / ports as f64)
    }

    /// Fraction of runahead-probed (non-chain) instructions whose
    /// remaining prefetches the filter suppressed.
    pub fn filtered_fraction(&self) -> Result<f64, StatsError> {
        if self.runahead_instr_probed == 0 {
            return Err(StatsError::Undefined("filtered_fraction with no probed instructions"));
        }
        Ok((self.runahead_instr_probed - self.runahead_instr_granted) as f64
            / self.runahead_instr_probed as f64)
    }

    /// Weighted sum of energy events.
    pub fn energy_proxy(&self, weights: &EnergyWeights) -> Result<f64, StatsError> {
        weights.validate()?;
        Ok(self.energy_llc_access as f64 * weights.llc_access
            + self.energy_dram_access as f64 * weights.dram_access
            + self.energy_mac_op as f64 * weights.mac_op
            + self.energy_vmr_access as f64 * weights.vmr_access
            + self.energy_riq_op as f64 * weights.riq_op)
    }
}

/// Per-event unit costs for the energy proxy. Defaults are all 1, so the
/// default proxy is a plain event count; only relative comparisons are
/// meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub llc_access: f64,
    pub dram_access: f64,
    pub mac_op: f64,
    pub vmr_access: f64,
    pub riq_op: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            llc_access: 1.0,
            dram_access: 1.0,
            mac_op: 1.0,
            vmr_access: 1.0,
            riq_op: 1.0,
        }
    }
}

impl EnergyWeights {
    fn validate(&self) -> Result<(), StatsError> {
        for (name, v) in [
            ("llc_access", self.llc_access),
            ("dram_access", self.dram_access),
            ("mac_op", self.mac_op),
            ("vmr_access", self.vmr_access),
            ("riq_op", self.riq_op),
        ] {
            if v < 0.0 {
                return Err(StatsError::NegativeWeight(name));
            }
        }
        Ok(())
    }
}

/// Ratios derived from the ledger; `null` in JSON when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub miss_rate: Option<f64>,
    pub demand_miss_rate: Option<f64>,
    pub pe_utilization: Option<f64>,
    pub redundancy_rate: Option<f64>,
    pub avg_demand_latency: Option<f64>,
    pub bandwidth_occupancy: Option<f64>,
    pub filtered_fraction: Option<f64>,
    pub energy_proxy_unit_weights: Option<f64>,
}

impl DerivedMetrics {
    pub fn from_ledger(ledger: &StatLedger) -> Self {
        DerivedMetrics {
            miss_rate: ledger.miss_rate().ok(),
            demand_miss_rate: ledger.demand_miss_rate().ok(),
            pe_utilization: ledger.pe_utilization().ok(),
            redundancy_rate: ledger.redundancy_rate().ok(),
            avg_demand_latency: ledger.avg_demand_latency().ok(),
            bandwidth_occupancy: ledger.bandwidth_occupancy().ok(),
            filtered_fraction: ledger.filtered_fraction().ok(),
            energy_proxy_unit_weights: ledger.energy_proxy(&EnergyWeights::default()).ok(),
        }
    }
}

/// A complete run report: version, config hash and echo, seed, raw
/// counters, derived metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub ledger: StatLedger,
    pub derived: DerivedMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

fn csv_cell_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

impl Report {
    pub fn new(config: serde_json::Value, seed: u64, ledger: StatLedger) -> Self {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(&config).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let config_hash = format!("{:x}", hasher.finalize());
        let derived = DerivedMetrics::from_ledger(&ledger);
        Report {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            config,
            ledger,
            derived,
        }
    }

    pub fn emit(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => serde_json::to_string_pretty(self).expect("report serializes"),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    /// Fixed CSV schema. Column order matches [`CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let l = &self.ledger;
        let d = &self.derived;
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let cells: Vec<String> = vec![
            self.version.clone(),
            self.config_hash.clone(),
            self.seed.to_string(),
            l.cycles.to_string(),
            l.demand_load_requests.to_string(),
            l.demand_load_hits.to_string(),
            l.demand_load_misses.to_string(),
            l.store_requests.to_string(),
            l.store_hits.to_string(),
            l.store_misses.to_string(),
            l.prefetch_requests.to_string(),
            l.prefetch_hits.to_string(),
            l.prefetch_misses.to_string(),
            l.chain_requests.to_string(),
            l.chain_hits.to_string(),
            l.chain_misses.to_string(),
            l.redundant_prefetches.to_string(),
            l.banks.to_string(),
            l.bank_read_busy_cycles.to_string(),
            l.bank_write_busy_cycles.to_string(),
            l.dram_transfers.to_string(),
            l.demand_latency_sum.to_string(),
            l.demand_latency_count.to_string(),
            l.active_pe_cycles.to_string(),
            l.systolic_busy_cycles.to_string(),
            l.instructions_dispatched.to_string(),
            l.mcfg_count.to_string(),
            l.mld_count.to_string(),
            l.mst_count.to_string(),
            l.mma_count.to_string(),
            l.mgather_count.to_string(),
            l.mscatter_count.to_string(),
            l.runahead_uops_sent.to_string(),
            l.chain_uops_sent.to_string(),
            l.runahead_instr_probed.to_string(),
            l.runahead_instr_granted.to_string(),
            l.dispatch_stall_cycles.to_string(),
            l.energy_llc_access.to_string(),
            l.energy_dram_access.to_string(),
            l.energy_mac_op.to_string(),
            l.energy_vmr_access.to_string(),
            l.energy_riq_op.to_string(),
            csv_cell_f64(d.miss_rate),
            csv_cell_f64(d.demand_miss_rate),
            csv_cell_f64(d.pe_utilization),
            csv_cell_f64(d.redundancy_rate),
            csv_cell_f64(d.avg_demand_latency),
            csv_cell_f64(d.bandwidth_occupancy),
            csv_cell_f64(d.filtered_fraction),
            csv_cell_f64(d.energy_proxy_unit_weights),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
        out
    }
}

pub const CSV_HEADER: &str = "version,config_hash,seed,cycles,demand_load_requests,demand_load_hits,demand_load_misses,store_requests,store_hits,store_misses,prefetch_requests,prefetch_hits,prefetch_misses,chain_requests,chain_hits,chain_misses,redundant_prefetches,banks,bank_read_busy_cycles,bank_write_busy_cycles,dram_transfers,demand_latency_sum,demand_latency_count,active_pe_cycles,systolic_busy_cycles,instructions_dispatched,mcfg_count,mld_count,mst_count,mma_count,mgather_count,mscatter_count,runahead_uops_sent,chain_uops_sent,runahead_instr_probed,runahead_instr_granted,dispatch_stall_cycles,energy_llc_access,energy_dram_access,energy_mac_op,energy_vmr_access,energy_riq_op,miss_rate,demand_miss_rate,pe_utilization,redundancy_rate,avg_demand_latency,bandwidth_occupancy,filtered_fraction,energy_proxy_unit_weights";

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ledger() -> StatLedger {
        StatLedger {
            cycles: 100,
            demand_load_requests: 10,
            demand_load_hits: 8,
            demand_load_misses: 2,
            prefetch_requests: 4,
            prefetch_hits: 3,
            prefetch_misses: 1,
            redundant_prefetches: 2,
            banks: 16,
            bank_read_busy_cycles: 14,
            demand_latency_sum: 300,
            demand_latency_count: 10,
            active_pe_cycles: 256,
            ..Default::default()
        }
    }

    #[test]
    fn ratios_match_hand_computation() {
        let l = sample_ledger();
        assert_eq!(l.redundancy_rate().unwrap(), 0.5);
        assert_eq!(l.avg_demand_latency().unwrap(), 30.0);
        assert_eq!(l.pe_utilization().unwrap(), 256.0 / 25600.0);
        assert!((l.miss_rate().unwrap() - 3.0 / 14.0).abs() < 1e-12);
        assert_eq!(l.bandwidth_occupancy().unwrap(), 14.0 / 3200.0);
    }

    #[test]
    fn undefined_metrics_error() {
        let l = StatLedger::default();
        assert!(l.pe_utilization().is_err());
        assert!(l.redundancy_rate().is_err());
        assert!(l.avg_demand_latency().is_err());
        assert!(l.miss_rate().is_err());
    }

    #[test]
    fn energy_proxy_unit_weights_counts_events() {
        let mut l = StatLedger::default();
        assert_eq!(l.energy_proxy(&EnergyWeights::default()).unwrap(), 0.0);
        l.energy_llc_access = 3;
        l.energy_dram_access = 2;
        l.energy_mac_op = 5;
        assert_eq!(l.energy_proxy(&EnergyWeights::default()).unwrap(), 10.0);
        // Doubling only the DRAM weight separates DRAM-heavy runs.
        let heavy = EnergyWeights {
            dram_access: 2.0,
            ..Default::default()
        };
        assert_eq!(l.energy_proxy(&heavy).unwrap(), 12.0);
        let bad = EnergyWeights {
            mac_op: -1.0,
            ..Default::default()
        };
        assert!(l.energy_proxy(&bad).is_err());
    }

    #[test]
    fn reports_are_deterministic_and_parse() {
        let config = serde_json::json!({"kernel": "sddmm", "seed": 7});
        let r1 = Report::new(config.clone(), 7, sample_ledger());
        let r2 = Report::new(config, 7, sample_ledger());
        assert_eq!(r1.emit(ReportFormat::Json), r2.emit(ReportFormat::Json));
        assert_eq!(r1.to_csv(), r2.to_csv());
        let parsed: Report = serde_json::from_str(&r1.emit(ReportFormat::Json)).unwrap();
        assert_eq!(parsed, r1);
        // JSON exposes every ledger field.
        let v: serde_json::Value = serde_json::from_str(&r1.emit(ReportFormat::Json)).unwrap();
        assert!(v["ledger"]["cycles"].is_number());
        assert!(v["ledger"]["redundant_prefetches"].is_number());
        assert!(v["derived"]["redundancy_rate"].is_number());
    }

    #[test]
    fn csv_header_matches_row_arity() {
        let r = Report::new(serde_json::json!({}), 0, sample_ledger());
        let csv = r.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        let row = lines.next().unwrap();
        assert_eq!(header, CSV_HEADER);
        assert_eq!(header.split(',').count(), row.split(',').count());
    }
}
