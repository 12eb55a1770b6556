//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any fails.

use std::collections::HashSet;
use std::time::Instant;

use dmsim::apps::chase::{self, ChaseRequest};
use dmsim::clib::{Op, OpError, Ticket};
use dmsim::cluster::{Cluster, SimConfig};
use dmsim::netsim::Rule;
use dmsim::page_table::TableGeometry;
use dmsim::types::{PageSize, Pid};
use dmsim::wire::Status;
use dmsim_bench::experiment::{self, AllocRetryParams};
use dmsim_bench::run::run;
use dmsim_bench::workload::{Arrival, KeyDist, Kind, Micro, WorkloadSpec, YcsbMix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn small_pages(cfg: &mut SimConfig) {
    cfg.mn.page_size = PageSize::Size4K;
    cfg.mn.physical_bytes = 64 << 20;
    cfg.clib.page_size = PageSize::Size4K;
}

fn alloc_retry_curve() -> Outcome {
    let started = Instant::now();
    // Five seeded sweeps of 243 single-page allocations each.
    let trials = experiment::alloc_retry(&AllocRetryParams {
        sweeps: 5,
        ..Default::default()
    });
    let elapsed = started.elapsed().as_secs_f64();
    let early = trials.retried_at_or_below(0.5);
    let max = trials.max_retries();
    // Many more sweeps, to show how often any early retry happens at all.
    let wide = experiment::alloc_retry(&AllocRetryParams::default());
    let table = trials.table();
    let top = table.rows.last().map(|r| r.join("/")).unwrap_or_default();
    outcome(
        early == 0 && max <= 60 && elapsed < 60.0,
        format!(
            "{} allocations, retried at <=50%: {early}, max retries {max}, top bin {top}, {elapsed:.1}s; \
             over {} sweeps, {} had a retry at <=50% (max {})",
            trials.samples.len(),
            wide.params.sweeps,
            wide.sweeps_retrying_at_or_below(0.5),
            wide.max_retries(),
        ),
    )
}

fn one_fetch_translation() -> Outcome {
    let mut cfg = SimConfig::default();
    small_pages(&mut cfg);
    cfg.mn.tlb_entries = 64;
    cfg.cluster.memory_nodes = 2;
    cfg.cluster.compute_nodes = 2;
    let mut details = Vec::new();
    let mut pass = true;
    for kind in [
        Kind::Micro(Micro::Read),
        Kind::Micro(Micro::Write),
        Kind::Ycsb(YcsbMix::A),
    ] {
        let spec = WorkloadSpec {
            kind: kind.clone(),
            clients: 8,
            ops: 100_000,
            keys: 8192,
            dist: KeyDist::Uniform,
            value_size: 64,
            arrival: Arrival::Closed,
            seed: 5,
        };
        let r = run(&cfg, &spec).expect("workload runs");
        let exact = r
            .mn_translations
            .iter()
            .all(|m| m.bucket_fetches == m.tlb_miss_translations);
        pass &= exact && r.tlb_miss_translations > 0 && r.ops_ok == 100_000;
        details.push(format!(
            "{}: misses {} fetches {}",
            kind.name(),
            r.tlb_miss_translations,
            r.bucket_fetches
        ));
    }
    outcome(pass, details.join("; "))
}

fn constant_fault_cost() -> Outcome {
    let rows = experiment::fault_constancy(&[0.1, 0.5, 0.9]);
    let pass = rows
        .iter()
        .all(|r| r.fault_stalls == 0 && r.delta() == 3 * r.step_ns as i64);
    let detail = rows
        .iter()
        .map(|r| {
            format!(
                "{:.0}%: {} ns (stalls {})",
                r.occupancy * 100.0,
                r.delta(),
                r.fault_stalls
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, detail)
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    max / min - 1.0
}

fn scalability() -> Outcome {
    let started = Instant::now();
    let rows = experiment::scalability(&[1, 16, 256, 1024], 20_000, 1).expect("runs");
    let elapsed = started.elapsed().as_secs_f64();
    let p50 = spread(rows.iter().map(|r| r.p50 as f64));
    let state = spread(rows.iter().map(|r| r.control_state_bytes as f64));
    let detail = rows
        .iter()
        .map(|r| {
            format!(
                "{}: p50 {} state {}",
                r.clients, r.p50, r.control_state_bytes
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        p50 <= 0.05 && state <= 0.05 && elapsed < 300.0,
        format!(
            "{detail}; spread p50 {:.2}% state {:.2}%, {elapsed:.1}s",
            p50 * 100.0,
            state * 100.0
        ),
    )
}

fn reliability() -> Outcome {
    const SEEDS: u64 = 20;
    let outcomes: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (1..=SEEDS)
            .map(|seed| {
                s.spawn(move || {
                    let cfg = experiment::program_config(0.01, 0.005, 0.005, 2000, seed);
                    experiment::random_program(&cfg, seed, 10_000)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    // A request that exhausts its retries is reported to the caller; what
    // must never happen is memory or a delivered result disagreeing with
    // the sequential model.
    let bad = outcomes
        .iter()
        .filter(|o| o.divergent_bytes > 0 || o.read_mismatches > 0)
        .count();
    let retries: u64 = outcomes.iter().map(|o| o.retries).sum();
    let failed: usize = outcomes.iter().map(|o| o.failed).sum();
    let divergent: usize = outcomes.iter().map(|o| o.divergent_bytes).sum();
    let mismatches: usize = outcomes.iter().map(|o| o.read_mismatches).sum();
    outcome(
        bad == 0,
        format!(
            "{SEEDS} seeds x 10000 ops: divergent seeds {bad}, divergent bytes {divergent}, \
             result mismatches {mismatches}, retries {retries}, ops that exhausted retries {failed}"
        ),
    )
}

fn exactly_once() -> Outcome {
    const PID: Pid = 3;
    let mut cfg = SimConfig::default();
    small_pages(&mut cfg);
    cfg.net.rules.push(Rule::DropOriginalResponses);
    let mut c = Cluster::new(&cfg);
    let va = c.alloc(0, PID, 4096).unwrap();
    let before = c.client(0).stats().retries;
    let mut olds = HashSet::new();
    let mut errors = 0;
    for _ in 0..1000 {
        match c.fetch_add(0, PID, va, 1) {
            Ok(old) => {
                olds.insert(old);
            }
            Err(_) => errors += 1,
        }
    }
    let retries = c.client(0).stats().retries - before;
    let final_value = u64::from_le_bytes(c.peek(PID, va, 8).unwrap().try_into().unwrap());
    let distinct = olds == (0..1000).collect();
    outcome(
        final_value == 1000 && errors == 0 && distinct && retries >= 1000,
        format!("counter {final_value}, retries {retries}, errors {errors}, old values distinct 0..1000: {distinct}"),
    )
}

fn aimd_and_pacing() -> Outcome {
    const PID: Pid = 4;
    let mut cfg = SimConfig::default();
    small_pages(&mut cfg);
    cfg.cluster.services = false;
    cfg.clib.log_cwnd = true;
    // The smoothed RTT tracks the last sample, so each pacing gap can be
    // predicted from the values logged with the send.
    cfg.clib.rtt_alpha = 1.0;
    let mut c = Cluster::new(&cfg);
    let page = 4096;
    let va = c.alloc(0, PID, 256 * page).unwrap();
    for i in 0..256 {
        c.write(0, PID, va + i * page, &[1]).unwrap();
    }
    let node = c.mn_ids()[0];
    let step_at = c.now() + 5_000;
    c.net_mut().plan_mut().rules.push(Rule::ExtraDelay {
        after: step_at,
        extra: 50_000,
    });
    let sends_before = c.client(0).cwnd_log().len();
    let updates_before = c.client(0).aimd_log().len();
    for i in 0..400 {
        c.submit(
            0,
            PID,
            0,
            Op::Read {
                va: va + (i % 256) * page,
                len: 64,
            },
        );
    }
    c.release(0, PID, 0);

    let client = c.client(0);
    let base = client
        .session(node)
        .and_then(|s| s.base_rtt)
        .expect("handshake done") as f64;
    let p = client.config().aimd();
    // Independent replay of every window update from the initial window.
    let mut cwnd = cfg.clib.cwnd_init;
    let mut mismatches = 0;
    let mut min_cwnd = f64::MAX;
    for (i, e) in client
        .aimd_log()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.node == node)
    {
        let target = cfg.clib.target_delay_factor * base;
        let next = match e.rtt {
            Some(rtt) if rtt as f64 <= target => cwnd + p.additive_step / cwnd,
            _ => cwnd * p.multiplicative_factor,
        }
        .clamp(p.floor, p.max);
        if (e.before - cwnd).abs() > 1e-9
            || (e.after - next).abs() > 1e-9
            || (e.target - target).abs() > 1e-9
        {
            mismatches += 1;
        }
        cwnd = next;
        if i >= updates_before {
            min_cwnd = min_cwnd.min(e.after);
        }
    }
    // After the step every sample is late: a geometric decay to the floor.
    let late: Vec<_> = client
        .aimd_log()
        .iter()
        .filter(|e| e.node == node && e.rtt.is_some_and(|r| r as f64 > e.target))
        .collect();
    let closed_form_ok = late.first().is_some_and(|first| {
        late.iter().enumerate().all(|(k, e)| {
            let expect = (first.before * p.multiplicative_factor.powi(k as i32 + 1)).max(p.floor);
            (e.after - expect).abs() <= 1e-9 * expect.max(1.0)
        })
    });
    let sends: Vec<_> = client.cwnd_log()[sends_before..]
        .iter()
        .filter(|s| s.node == node && !s.retry)
        .collect();
    let mut paced = 0;
    let mut gap_errors = 0;
    for w in sends.windows(2) {
        if w[1].cwnd < 1.0 {
            paced += 1;
            let gap = (w[1].time - w[0].time) as f64;
            if (gap - w[1].srtt / w[1].cwnd).abs() > 1.0 {
                gap_errors += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && closed_form_ok && min_cwnd < 1.0 && paced >= 20 && gap_errors == 0,
        format!(
            "{} updates, oracle mismatches {mismatches}, geometric decay over {} late samples: {closed_form_ok}, \
             min cwnd {min_cwnd:.4}, paced sends {paced}, gaps off by >1 ns: {gap_errors}",
            client.aimd_log().len(),
            late.len()
        ),
    )
}

/// Per-CN processes doing random writes, reads and fetch-adds in async
/// batches. Returns every result, the final memory of each process, and
/// the number of completed migrations.
type ProgramResult = (Vec<Result<Vec<u8>, OpError>>, Vec<Vec<u8>>, usize);

fn migration_program(migrate: bool) -> ProgramResult {
    const PAGES: u64 = 128;
    const PAGE: u64 = 4096;
    let mut cfg = SimConfig::default();
    small_pages(&mut cfg);
    cfg.cluster.memory_nodes = 3;
    cfg.cluster.compute_nodes = 2;
    cfg.cluster.services = false;
    let mut c = Cluster::new(&cfg);
    let pids: [Pid; 2] = [11, 12];
    let bases: Vec<u64> = (0..2)
        .map(|cn| c.alloc(cn, pids[cn], PAGES * PAGE).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut results = Vec::new();
    let mns = c.mn_ids();
    for round in 0..12 {
        let mut tickets: Vec<(usize, Ticket)> = Vec::new();
        for _ in 0..100 {
            let cn = rng.random_range(0..2);
            let pid = pids[cn];
            let base = bases[cn];
            let op = match rng.random_range(0..3) {
                0 => {
                    let len = rng.random_range(1..=2 * PAGE);
                    let off = rng.random_range(0..=PAGES * PAGE - len);
                    let fill: u8 = rng.random();
                    Op::Write {
                        va: base + off,
                        data: (0..len).map(|i| fill ^ i as u8).collect(),
                    }
                }
                1 => {
                    let len = rng.random_range(1..=2 * PAGE);
                    let off = rng.random_range(0..=PAGES * PAGE - len);
                    Op::Read {
                        va: base + off,
                        len: len as u32,
                    }
                }
                _ => Op::FetchAdd {
                    va: base + rng.random_range(0..PAGES * PAGE / 8) * 8,
                    delta: rng.random_range(1..100),
                },
            };
            // One thread per process keeps same-page operations ordered.
            tickets.push((cn, c.submit(cn, pid, 0, op)));
        }
        if migrate && (2..9).contains(&round) {
            let pid = pids[round % 2];
            let owner = c.controller().owner(pid, 0).unwrap();
            let dst = *mns.iter().find(|&&m| m != owner).unwrap();
            c.migrate(pid, 0, dst).unwrap();
        }
        for (cn, t) in tickets {
            results.push(c.wait(cn, t));
        }
        c.settle_migrations();
    }
    c.run_until_idle();
    let memory = (0..2)
        .map(|cn| {
            c.peek(pids[cn], bases[cn], (PAGES * PAGE) as usize)
                .unwrap()
        })
        .collect();
    let moved = c
        .controller()
        .history()
        .iter()
        .filter(|m| m.status == Status::Ok && !m.automatic)
        .count();
    (results, memory, moved)
}

fn migration_safety() -> Outcome {
    let (plain_results, plain_memory, _) = migration_program(false);
    let (results, memory, moved) = migration_program(true);
    let failed = results.iter().filter(|r| r.is_err()).count();
    let differing = plain_results
        .iter()
        .zip(&results)
        .filter(|(a, b)| a != b)
        .count();
    outcome(
        moved >= 5 && failed == 0 && differing == 0 && memory == plain_memory,
        format!(
            "{moved} migrations, {} ops, failed {failed}, results differing {differing}, memory equal {}",
            results.len(),
            memory == plain_memory
        ),
    )
}

fn kv_and_chase() -> Outcome {
    let mut cfg = SimConfig::default();
    small_pages(&mut cfg);
    cfg.cluster.memory_nodes = 2;
    cfg.cluster.compute_nodes = 2;
    let mut pass = true;
    let mut details = Vec::new();
    for mix in [YcsbMix::A, YcsbMix::B, YcsbMix::C] {
        let mut spec = WorkloadSpec::ycsb(mix, 8, 10_000, 1000);
        spec.seed = 21;
        let r = run(&cfg, &spec).expect("ycsb runs");
        pass &= r.verify_mismatches == 0 && r.ops_ok == 10_000 && r.ops_failed == 0;
        details.push(format!(
            "{mix:?}: ok {} mismatches {}",
            r.ops_ok, r.verify_mismatches
        ));
    }

    // Pointer chase over a shuffled list, counting packets on the wire.
    const PID: Pid = 5;
    const NODES: u64 = 256;
    let mut c = Cluster::new(&cfg);
    let base = c.alloc(0, PID, NODES * 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut order: Vec<u64> = (0..NODES).collect();
    order.shuffle(&mut rng);
    for (pos, &slot) in order.iter().enumerate() {
        let next = order.get(pos + 1).map_or(0, |&n| base + n * 64);
        let mut node = (pos as u64 * 3 + 1).to_le_bytes().to_vec();
        node.extend(next.to_le_bytes());
        node.resize(64, pos as u8);
        c.write(0, PID, base + slot * 64, &node).unwrap();
    }
    let head = base + order[0] * 64;
    c.net_mut().enable_trace();
    let cn = c.client(0).id().to_string();
    let calls = 200;
    let mut found = 0;
    for _ in 0..calls {
        let pos = rng.random_range(0..NODES);
        let req = ChaseRequest {
            head,
            key: pos * 3 + 1,
            key_offset: 0,
            next_offset: 8,
            max_hops: NODES as u32,
            node_len: 64,
        };
        let t = c.submit(0, PID, 0, req.op());
        let reply = c.wait(0, t).unwrap();
        if chase::decode_reply(&reply).is_some_and(|(va, _)| va == base + order[pos as usize] * 64)
        {
            found += 1;
        }
    }
    let trace = c.net_mut().take_trace();
    let requests = trace
        .lines()
        .filter(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[1] == "send" && f[2] == cn
        })
        .count();
    pass &= found == calls && requests == calls;
    details.push(format!(
        "chase: {calls} calls, {found} found, {requests} request packets"
    ));
    outcome(pass, details.join("; "))
}

fn table_sizing() -> Outcome {
    let physical = 1u64 << 30;
    let g = TableGeometry::for_memory(physical, PageSize::Size4M.bytes(), 8, 2);
    let ratio = g.table_bytes() as f64 / physical as f64;
    outcome(
        ratio <= 0.005,
        format!("{} bytes for 1 GB ({:.4}%)", g.table_bytes(), ratio * 100.0),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 10] = [
        ("allocation retry curve", alloc_retry_curve),
        ("one-fetch translation", one_fetch_translation),
        ("constant fault cost", constant_fault_cost),
        ("scalability across client counts", scalability),
        ("reliability under loss", reliability),
        ("exactly-once atomic retry", exactly_once),
        ("AIMD window and pacing", aimd_and_pacing),
        ("migration safety", migration_safety),
        ("KV oracle and pointer chase", kv_and_chase),
        ("page table sizing", table_sizing),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failures += !o.pass as usize;
        println!(
            "{} {:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    if failures > 0 {
        println!("{failures} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
