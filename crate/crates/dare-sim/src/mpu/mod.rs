//! The cycle-level DARE core.

mod classifier;
mod machine;
mod vmr;

pub use classifier::{ClassifierConfig, LatencyClassifier, Prediction};
pub use machine::{systolic_latency, InstrAudit, Machine, MachineConfig, MachineError, RfuMode, RunOutcome};
pub use vmr::{VmrEntry, VmrFile};

#[cfg(test)]
mod tests;
