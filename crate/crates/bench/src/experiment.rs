//! Named experiments producing CSV tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dmsim::clib::{Completion, Op, OpError, Ticket};
use dmsim::cluster::{Cluster, Driver, SimConfig};
use dmsim::metadata::MetadataPlane;
use dmsim::page_table::{HashPageTable, TableGeometry};
use dmsim::types::{PageSize, Perms, Pid, SimTime};
use dmsim::wire::Opcode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::report::LatencySummary;
use crate::run::{run, RunError};
use crate::workload::{Arrival, KeyDist, Kind, Micro, WorkloadSpec};

pub const NAMES: [&str; 4] = [
    "alloc_retry",
    "scalability",
    "fault_constancy",
    "loss_resilience",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExperimentError {
    #[error("unknown experiment {0:?}; expected one of alloc_retry, scalability, fault_constancy, loss_resilience")]
    Unknown(String),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// A CSV table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Runs the experiment called `name` with its default parameters.
pub fn by_name(name: &str, seed: u64) -> Result<Table, ExperimentError> {
    match name {
        "alloc_retry" => Ok(alloc_retry(&AllocRetryParams {
            seed,
            ..Default::default()
        })
        .table()),
        "scalability" => Ok(scalability_table(&scalability(
            &[1, 16, 256, 1024],
            20_000,
            seed,
        )?)),
        "fault_constancy" => Ok(fault_table(&fault_constancy(&[0.1, 0.5, 0.9]))),
        "loss_resilience" => Ok(loss_table(&loss_resilience(
            &[0.0, 0.001, 0.01, 0.05],
            2000,
            seed,
        ))),
        other => Err(ExperimentError::Unknown(other.to_string())),
    }
}

// Allocation retries ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AllocRetryParams {
    pub physical_bytes: u64,
    pub page: PageSize,
    pub slots_per_bucket: usize,
    pub overprovision: u64,
    /// Independent sweeps from empty to `fill`.
    pub sweeps: usize,
    pub fill: f64,
    /// Processes sharing the table in each sweep.
    pub pids: usize,
    pub seed: u64,
}

impl Default for AllocRetryParams {
    fn default() -> Self {
        AllocRetryParams {
            physical_bytes: 1 << 30,
            page: PageSize::Size4M,
            slots_per_bucket: 8,
            overprovision: 2,
            sweeps: 1000,
            fill: 0.95,
            pids: 8,
            seed: 1,
        }
    }
}

/// Retries of one single-page allocation and the occupancy it saw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocSample {
    pub sweep: usize,
    pub occupancy: f64,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocRetryResult {
    pub params: AllocRetryParams,
    pub samples: Vec<AllocSample>,
}

impl AllocRetryResult {
    /// Allocations made at or below `occupancy` that needed a retry.
    pub fn retried_at_or_below(&self, occupancy: f64) -> usize {
        self.samples
            .iter()
            .filter(|s| s.occupancy <= occupancy && s.retries > 0)
            .count()
    }

    /// Sweeps with at least one retry at or below `occupancy`.
    pub fn sweeps_retrying_at_or_below(&self, occupancy: f64) -> usize {
        let mut sweeps: Vec<usize> = self
            .samples
            .iter()
            .filter(|s| s.occupancy <= occupancy && s.retries > 0)
            .map(|s| s.sweep)
            .collect();
        sweeps.dedup();
        sweeps.len()
    }

    pub fn max_retries(&self) -> u32 {
        self.samples.iter().map(|s| s.retries).max().unwrap_or(0)
    }

    /// Per 5%-occupancy bin: allocations, retried allocations, mean and max.
    pub fn table(&self) -> Table {
        let mut bins: BTreeMap<u32, (u64, u64, u64, u32)> = BTreeMap::new();
        for s in &self.samples {
            let bin = ((s.occupancy * 100.0 + 1e-9) / 5.0).floor() as u32 * 5;
            let b = bins.entry(bin).or_default();
            b.0 += 1;
            b.1 += (s.retries > 0) as u64;
            b.2 += s.retries as u64;
            b.3 = b.3.max(s.retries);
        }
        let mut t = Table::new(&[
            "occupancy_pct",
            "allocations",
            "allocs_with_retry",
            "mean_retries",
            "max_retries",
        ]);
        for (bin, (n, with, sum, max)) in bins {
            t.push(vec![
                bin.to_string(),
                n.to_string(),
                with.to_string(),
                format!("{:.4}", sum as f64 / n as f64),
                max.to_string(),
            ]);
        }
        t
    }
}

/// Fills a fresh page table with single-page allocations from random
/// processes and records each allocation's retries against the occupancy
/// before it.
pub fn alloc_retry(p: &AllocRetryParams) -> AllocRetryResult {
    let page = p.page.bytes();
    let shift = page.trailing_zeros();
    let physical = p.physical_bytes / page;
    let target = (p.fill * physical as f64).floor() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut samples = Vec::new();
    for sweep in 0..p.sweeps {
        let geometry =
            TableGeometry::for_memory(p.physical_bytes, page, p.slots_per_bucket, p.overprovision);
        let mut table = HashPageTable::new(geometry);
        let mut meta = MetadataPlane::new(shift, physical, &table, 0);
        let pids: Vec<Pid> = (0..p.pids).map(|_| rng.random()).collect();
        let window = 1..(1u64 << 48) >> shift;
        for used in 0..target {
            let pid = pids[rng.random_range(0..pids.len())];
            let out = meta
                .alloc_va(&mut table, pid, page, Perms::RW, window.clone())
                .expect("a 48-bit window never runs out");
            samples.push(AllocSample {
                sweep,
                occupancy: used as f64 / physical as f64,
                retries: out.retries,
            });
        }
    }
    AllocRetryResult {
        params: p.clone(),
        samples,
    }
}

// Scalability ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ScalabilityRow {
    pub clients: usize,
    pub ops: u64,
    pub p50: u64,
    pub p99: u64,
    pub throughput: f64,
    pub control_state_bytes: usize,
    pub tlb_miss_fraction: f64,
}

/// The scalability setup: 4 KB pages, a 64-entry TLB, and a fixed total
/// working set spread over however many client processes.
pub fn scalability_config() -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.mn.page_size = PageSize::Size4K;
    cfg.mn.physical_bytes = 64 << 20;
    cfg.mn.tlb_entries = 64;
    cfg.clib.page_size = PageSize::Size4K;
    cfg.cluster.compute_nodes = 4;
    cfg.cluster.services = false;
    cfg
}

/// Open-loop reads at a fixed aggregate rate from each client count.
pub fn scalability(
    clients: &[usize],
    ops: u64,
    seed: u64,
) -> Result<Vec<ScalabilityRow>, RunError> {
    let cfg = scalability_config();
    let mut rows = Vec::new();
    for &n in clients {
        let spec = WorkloadSpec {
            kind: Kind::Micro(Micro::Read),
            clients: n,
            ops,
            keys: 4096,
            dist: KeyDist::Uniform,
            value_size: 64,
            arrival: Arrival::Open(2000.0),
            seed,
        };
        let r = run(&cfg, &spec)?;
        rows.push(ScalabilityRow {
            clients: n,
            ops,
            p50: r.latency_ns.p50,
            p99: r.latency_ns.p99,
            throughput: r.throughput,
            control_state_bytes: r.mn_control_state_bytes.iter().sum(),
            tlb_miss_fraction: r.tlb_miss_translations as f64 / ops.max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn scalability_table(rows: &[ScalabilityRow]) -> Table {
    let mut t = Table::new(&[
        "clients",
        "ops",
        "p50_ns",
        "p99_ns",
        "throughput_ops_per_s",
        "control_state_bytes",
        "tlb_miss_fraction",
    ]);
    for r in rows {
        t.push(vec![
            r.clients.to_string(),
            r.ops.to_string(),
            r.p50.to_string(),
            r.p99.to_string(),
            format!("{:.1}", r.throughput),
            r.control_state_bytes.to_string(),
            format!("{:.4}", r.tlb_miss_fraction),
        ]);
    }
    t
}

// Fault cost -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultRow {
    pub occupancy: f64,
    pub hit_service: SimTime,
    pub fault_service: SimTime,
    pub fault_stalls: u64,
    pub step_ns: u64,
}

impl FaultRow {
    pub fn delta(&self) -> i64 {
        self.fault_service as i64 - self.hit_service as i64
    }
}

/// Service time of a write to a mapped page versus a first-touch write, at
/// each memory occupancy. Both writes follow a TLB flush, so they differ
/// only in the fault.
pub fn fault_constancy(levels: &[f64]) -> Vec<FaultRow> {
    const PID: Pid = 1;
    let mut cfg = SimConfig::default();
    cfg.mn.page_size = PageSize::Size4K;
    cfg.mn.physical_bytes = 4 << 20;
    cfg.mn.log_service = true;
    cfg.clib.page_size = PageSize::Size4K;
    cfg.cluster.services = false;
    let mut c = Cluster::new(&cfg);
    let mn = c.mn_ids()[0];
    let page = cfg.mn.page_size.bytes();
    let pages = cfg.mn.physical_pages();
    // Single-page allocations cannot collide into an unusable range.
    let vas: Vec<u64> = (0..pages)
        .map_while(|_| c.alloc(0, PID, page).ok())
        .collect();
    let mut touched = 0usize;
    let mut rows = Vec::new();
    for &level in levels {
        while (touched as f64) < level * pages as f64 && touched + 1 < vas.len() {
            c.write(0, PID, vas[touched], &[1]).unwrap();
            touched += 1;
        }
        c.run_until_idle();
        let occupancy = c.mn(mn).core().occupancy();
        c.mn_mut(mn).flush_tlb();
        c.mn_mut(mn).clear_service_log();
        c.write(0, PID, vas[0], &[2]).unwrap();
        c.write(0, PID, vas[touched], &[3]).unwrap();
        touched += 1;
        let writes: Vec<_> = c
            .mn(mn)
            .service_log()
            .iter()
            .filter(|r| r.opcode == Opcode::Write.code())
            .copied()
            .collect();
        assert_eq!(writes.len(), 2);
        rows.push(FaultRow {
            occupancy,
            hit_service: writes[0].service_time(),
            fault_service: writes[1].service_time(),
            fault_stalls: c.mn(mn).stats().fault_stalls,
            step_ns: cfg.mn.step_ns,
        });
    }
    rows
}

pub fn fault_table(rows: &[FaultRow]) -> Table {
    let mut t = Table::new(&[
        "occupancy_pct",
        "hit_service_ns",
        "fault_service_ns",
        "delta_ns",
        "delta_steps",
        "fault_stalls",
    ]);
    for r in rows {
        t.push(vec![
            format!("{:.1}", r.occupancy * 100.0),
            r.hit_service.to_string(),
            r.fault_service.to_string(),
            r.delta().to_string(),
            format!("{:.2}", r.delta() as f64 / r.step_ns as f64),
            r.fault_stalls.to_string(),
        ]);
    }
    t
}

// Loss resilience ------------------------------------------------------------

/// Result of one randomized async program checked against its sequential
/// execution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramOutcome {
    pub ops: usize,
    pub failed: usize,
    pub read_mismatches: usize,
    pub divergent_bytes: usize,
    pub retries: u64,
    pub latency: LatencySummary,
}

impl ProgramOutcome {
    pub fn clean(&self) -> bool {
        self.failed == 0 && self.read_mismatches == 0 && self.divergent_bytes == 0
    }
}

const PROGRAM_PAGES: u64 = 16;

/// Cluster for the program: 4 KB pages, one memory node.
pub fn program_config(loss: f64, dup: f64, corrupt: f64, jitter: SimTime, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.mn.page_size = PageSize::Size4K;
    cfg.mn.physical_bytes = 64 << 20;
    cfg.clib.page_size = PageSize::Size4K;
    cfg.cluster.services = false;
    cfg.net.seed = seed;
    cfg.net.loss = loss;
    cfg.net.dup = dup;
    cfg.net.corrupt = corrupt;
    cfg.net.jitter = jitter;
    cfg
}

/// Runs `ops` random writes, reads and atomics from one thread without
/// waiting, with occasional release barriers, then compares every result
/// and the final memory with a sequential model.
pub fn random_program(cfg: &SimConfig, seed: u64, ops: usize) -> ProgramOutcome {
    const PID: Pid = 9;
    let page = cfg.clib.page_size.bytes();
    let size = PROGRAM_PAGES * page;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Cluster::new(cfg);
    let base = c.alloc(0, PID, size).expect("program buffer");
    let mut model = vec![0u8; size as usize];
    let mut expect: Vec<(Ticket, Option<Vec<u8>>)> = Vec::with_capacity(ops);
    let mut retries_before = c.client(0).stats().retries;
    let mut collector = Collector::default();
    let mut issued = 0;
    while issued < ops {
        if rng.random_bool(0.02) {
            collector.want = expect.len();
            c.drive(&mut collector, SimTime::MAX);
            continue;
        }
        issued += 1;
        let roll: f64 = rng.random();
        let (op, result) = if roll < 0.4 {
            let len = rng.random_range(1..=6000u64);
            let off = rng.random_range(0..=size - len);
            let byte: u8 = rng.random();
            let data: Vec<u8> = (0..len).map(|i| byte.wrapping_add(i as u8)).collect();
            model[off as usize..(off + len) as usize].copy_from_slice(&data);
            (
                Op::Write {
                    va: base + off,
                    data,
                },
                Some(Vec::new()),
            )
        } else if roll < 0.8 {
            let len = rng.random_range(1..=6000u64);
            let off = rng.random_range(0..=size - len);
            let data = model[off as usize..(off + len) as usize].to_vec();
            (
                Op::Read {
                    va: base + off,
                    len: len as u32,
                },
                Some(data),
            )
        } else if roll < 0.93 {
            let off = rng.random_range(0..size / 8) * 8;
            let delta = rng.random_range(1..1000u64);
            let at = off as usize..off as usize + 8;
            let old = u64::from_le_bytes(model[at.clone()].try_into().unwrap());
            model[at].copy_from_slice(&old.wrapping_add(delta).to_le_bytes());
            (
                Op::FetchAdd {
                    va: base + off,
                    delta,
                },
                Some(old.to_be_bytes().to_vec()),
            )
        } else {
            let off = rng.random_range(0..size / 8) * 8;
            let at = off as usize..off as usize + 8;
            let old = u64::from_le_bytes(model[at.clone()].try_into().unwrap());
            let guess = if rng.random_bool(0.5) { old } else { old ^ 1 };
            let new: u64 = rng.random();
            if guess == old {
                model[at].copy_from_slice(&new.to_le_bytes());
            }
            (
                Op::CompareSwap {
                    va: base + off,
                    expect: guess,
                    new,
                },
                Some(old.to_be_bytes().to_vec()),
            )
        };
        let t = c.submit(0, PID, 0, op);
        expect.push((t, result));
    }
    collector.want = expect.len();
    c.drive(&mut collector, SimTime::MAX);
    assert!(
        collector.finished(),
        "simulation stalled with operations pending"
    );
    retries_before = c.client(0).stats().retries - retries_before;

    let mut failed = 0;
    let mut read_mismatches = 0;
    for (t, want) in expect {
        match c.reap(0, t).expect("released tickets are finished") {
            Ok(got) => {
                if want.is_some_and(|w| w != got) {
                    read_mismatches += 1;
                }
            }
            Err(OpError::Timeout(_)) | Err(OpError::Status(_)) => failed += 1,
        }
    }
    let mut latencies = collector.latencies;
    let memory = c.peek(PID, base, size as usize).expect("buffer is mapped");
    let divergent_bytes = memory.iter().zip(&model).filter(|(a, b)| a != b).count();
    ProgramOutcome {
        ops,
        failed,
        read_mismatches,
        divergent_bytes,
        retries: retries_before,
        latency: LatencySummary::of(&mut latencies),
    }
}

/// Records completion latencies and stops once `want` operations finished.
#[derive(Default)]
struct Collector {
    want: usize,
    latencies: Vec<u64>,
}

impl Driver for Collector {
    fn completed(&mut self, _: &mut Cluster, _: usize, done: Completion) {
        self.latencies.push(done.finished - done.submitted);
    }

    fn finished(&self) -> bool {
        self.latencies.len() >= self.want
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub loss: f64,
    pub outcome: ProgramOutcome,
}

/// The random program at each loss rate, with duplication and corruption
/// at half the loss rate each and 2 µs of jitter.
pub fn loss_resilience(rates: &[f64], ops: usize, seed: u64) -> Vec<LossRow> {
    rates
        .iter()
        .map(|&loss| {
            let cfg = program_config(loss, loss / 2.0, loss / 2.0, 2000, seed);
            LossRow {
                loss,
                outcome: random_program(&cfg, seed, ops),
            }
        })
        .collect()
}

pub fn loss_table(rows: &[LossRow]) -> Table {
    let mut t = Table::new(&[
        "loss",
        "dup",
        "corrupt",
        "ops",
        "failed",
        "retries",
        "read_mismatches",
        "divergent_bytes",
        "p50_ns",
        "p99_ns",
    ]);
    for r in rows {
        let o = &r.outcome;
        let mut loss = String::new();
        write!(loss, "{}", r.loss).unwrap();
        t.push(vec![
            loss,
            (r.loss / 2.0).to_string(),
            (r.loss / 2.0).to_string(),
            o.ops.to_string(),
            o.failed.to_string(),
            o.retries.to_string(),
            o.read_mismatches.to_string(),
            o.divergent_bytes.to_string(),
            o.latency.p50.to_string(),
            o.latency.p99.to_string(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "2".into()]);
        assert_eq!(t.to_csv(), "a,b\n1,2\n");
    }

    #[test]
    fn alloc_sweep_reaches_the_fill_level() {
        let r = alloc_retry(&AllocRetryParams {
            sweeps: 2,
            ..Default::default()
        });
        assert_eq!(r.samples.len(), 2 * 243);
        assert!(r.samples.iter().all(|s| s.occupancy < 0.95));
        assert!(!r.table().rows.is_empty());
    }

    #[test]
    fn unknown_experiment() {
        assert_eq!(
            by_name("frob", 1),
            Err(ExperimentError::Unknown("frob".into()))
        );
    }

    #[test]
    fn fault_free_program_is_clean() {
        let o = random_program(&program_config(0.0, 0.0, 0.0, 0, 1), 1, 500);
        assert!(o.clean(), "{o:?}");
        assert_eq!(o.retries, 0);
    }
}
