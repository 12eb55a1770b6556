//! Run statistics. Every latency is in simulated nanoseconds.

use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: u64,
    pub p50: u64,
    pub p99: u64,
    pub max: u64,
    pub mean: f64,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencySummary {
    /// Summarizes the whole population; nothing is sampled.
    pub fn of(samples: &mut [u64]) -> Self {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        samples.sort_unstable();
        let sum: u128 = samples.iter().map(|&s| s as u128).sum();
        LatencySummary {
            count: samples.len() as u64,
            p50: percentile(samples, 0.50),
            p99: percentile(samples, 0.99),
            max: *samples.last().unwrap(),
            mean: sum as f64 / samples.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CwndPoint {
    pub time: u64,
    pub client: usize,
    pub node: u16,
    pub cwnd: f64,
}

/// Translation counters of one memory node over the measured phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MnTranslations {
    pub tlb_miss_translations: u64,
    pub bucket_fetches: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub workload: String,
    pub seed: u64,
    pub clients: usize,
    pub ops_issued: u64,
    pub ops_ok: u64,
    pub ops_failed: u64,
    pub latency_ns: LatencySummary,
    pub sim_duration_ns: u64,
    /// Operations per simulated second.
    pub throughput: f64,
    pub transmissions: u64,
    pub retries: u64,
    pub timeouts: u64,
    pub nacks: u64,
    pub faults: u64,
    pub fault_stalls: u64,
    pub tlb_miss_translations: u64,
    pub bucket_fetches: u64,
    pub mn_translations: Vec<MnTranslations>,
    /// Reads whose result disagreed with the workload's own model.
    pub verify_mismatches: u64,
    pub alloc_retry_histogram: BTreeMap<u32, u64>,
    pub mn_control_state_bytes: Vec<usize>,
    pub cwnd: Vec<CwndPoint>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 0.5), 50);
        assert_eq!(percentile(&v, 0.99), 99);
        assert_eq!(percentile(&v, 1.0), 100);
        assert_eq!(percentile(&[7], 0.01), 7);
        assert_eq!(percentile(&[], 0.5), 0);
    }

    #[test]
    fn summary_is_ordered() {
        let mut v = vec![5, 1, 9, 3, 3, 100];
        let s = LatencySummary::of(&mut v);
        assert!(s.p50 <= s.p99 && s.p99 <= s.max);
        assert_eq!((s.count, s.max), (6, 100));
        assert_eq!(LatencySummary::of(&mut []), LatencySummary::default());
    }
}
