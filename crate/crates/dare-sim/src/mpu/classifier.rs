//! Threshold-based unsupervised hit/miss classifier over observed load
//! latencies.
//!
//! Memory latency under a cache is bimodal: one peak for LLC hits, one
//! for misses. The classifier keeps a ring buffer of recent latencies,
//! bins them, and when two sufficiently separated peaks exist, places
//! the threshold at the emptiest bin between them plus a fixed slack.
//! Anything above the threshold is classified as a miss. Until a valid
//! bimodal update has happened, everything is classified as a miss
//! (grant-by-default warm-up).

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Ring buffer length.
    pub window: usize,
    /// Histogram bin width in cycles.
    pub bin_width: u64,
    /// Relative frequency a bin must exceed to count as a peak.
    pub peak_fraction: f64,
    /// Minimum peak separation, in bins, for a threshold update.
    pub peak_margin_bins: usize,
    /// Cycles added above the valley to absorb hit-latency jitter.
    pub slack: u64,
    /// Latencies at or beyond `max_bins * bin_width` clamp into the top bin.
    pub max_bins: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            window: 32,
            bin_width: 8,
            peak_fraction: 0.2,
            peak_margin_bins: 4,
            slack: 32,
            max_bins: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Hit,
    Miss,
}

#[derive(Debug, Clone)]
pub struct LatencyClassifier {
    cfg: ClassifierConfig,
    samples: VecDeque<u64>,
    threshold: Option<u64>,
}

impl LatencyClassifier {
    pub fn new(cfg: ClassifierConfig) -> Self {
        LatencyClassifier {
            cfg,
            samples: VecDeque::with_capacity(cfg.window),
            threshold: None,
        }
    }

    pub fn threshold(&self) -> Option<u64> {
        self.threshold
    }

    fn bin_of(&self, latency: u64) -> usize {
        ((latency / self.cfg.bin_width) as usize).min(self.cfg.max_bins - 1)
    }

    /// Histogram over the current window as (bin lower edge, count).
    pub fn histogram(&self) -> Vec<(u64, usize)> {
        let mut counts = vec![0usize; self.cfg.max_bins];
        for &s in &self.samples {
            counts[self.bin_of(s)] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .filter(|(_, c)| *c > 0)
            .map(|(i, c)| (i as u64 * self.cfg.bin_width, c))
            .collect()
    }

    /// Records one completed-load latency and re-runs the three-step
    /// threshold update. Returns the threshold currently in effect.
    ///
    /// 1. Histogram the last `window` latencies into `bin_width` bins.
    /// 2. Bins whose relative frequency exceeds `peak_fraction` are
    ///    peaks; keep the smallest and largest.
    /// 3. If the peaks are more than `peak_margin_bins` apart, set the
    ///    threshold to the lower edge of the minimum-count bin strictly
    ///    between them (lowest index on ties) plus `slack`; otherwise
    ///    leave the threshold unchanged.
    pub fn observe(&mut self, latency: u64) -> Option<u64> {
        if self.samples.len() == self.cfg.window {
            self.samples.pop_front();
        }
        self.samples.push_back(latency);

        let mut counts = vec![0usize; self.cfg.max_bins];
        for &s in &self.samples {
            counts[self.bin_of(s)] += 1;
        }
        let total = self.samples.len() as f64;
        let peaks: Vec<usize> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c as f64 / total > self.cfg.peak_fraction)
            .map(|(i, _)| i)
            .collect();
        if peaks.len() >= 2 {
            let lo = *peaks.first().unwrap();
            let hi = *peaks.last().unwrap();
            if hi - lo > self.cfg.peak_margin_bins {
                let valley = (lo + 1..hi)
                    .min_by_key(|&b| counts[b])
                    .expect("margin guarantees interior bins");
                self.threshold = Some(valley as u64 * self.cfg.bin_width + self.cfg.slack);
            }
        }
        self.threshold
    }

    /// Miss iff a threshold exists and the latency exceeds it; with no
    /// threshold yet, default to miss so prefetch coverage is preserved
    /// during warm-up.
    pub fn predict(&self, latency: u64) -> Prediction {
        match self.threshold {
            Some(t) if latency <= t => Prediction::Hit,
            _ => Prediction::Miss,
        }
    }
}
