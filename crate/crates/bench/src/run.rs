//! Drives a workload through a simulated cluster and collects a report.

use std::collections::{BTreeMap, HashMap, VecDeque};

use dmsim::apps::chase::{self, ChaseRequest};
use dmsim::apps::{kv, mv};
use dmsim::clib::{Completion, Op, OpError, Ticket};
use dmsim::cluster::{Cluster, Driver, SimConfig};
use dmsim::types::{NodeId, Pid, SimTime, Va};
use dmsim::wire::Status;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::report::{CwndPoint, LatencySummary, MnTranslations, RunReport};
use crate::workload::{Arrival, KeyGen, Kind, Micro, TraceVerb, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error("workload setup failed: {0}")]
    Setup(String),
}

const CHASE_NODE: u32 = 64;
const MAX_CHASE_LIST: u64 = 1024;
const MAX_CWND_POINTS: usize = 1000;

/// One simulated client process: its own pid on one compute node.
#[derive(Debug, Default)]
struct Proc {
    cn: usize,
    pid: Pid,
    base: Va,
    pages: u64,
    next_fault: u64,
    object: Option<(NodeId, u64)>,
    versions: HashMap<u64, Vec<u8>>,
    version_list: Vec<u64>,
    list: Vec<(u64, Va)>,
}

#[derive(Debug, Clone)]
enum Plan {
    Plain(Op),
    Alloc(u64),
    Get(Vec<u8>),
    Set(Vec<u8>, Vec<u8>),
    Delete(Vec<u8>),
    MvAppend(Vec<u8>),
    MvRead(u64),
    Chase(u64, Va),
}

impl Plan {
    fn key(&self) -> Option<&[u8]> {
        match self {
            Plan::Get(k) | Plan::Set(k, _) | Plan::Delete(k) => Some(k),
            _ => None,
        }
    }
}

struct Inflight {
    client: usize,
    plan: Plan,
    arrival: SimTime,
}

struct Runner<'a> {
    spec: &'a WorkloadSpec,
    rng: ChaCha8Rng,
    keys: KeyGen,
    procs: Vec<Proc>,
    page: u64,
    mns: Vec<NodeId>,
    max_value: u32,
    inflight: HashMap<(usize, Ticket), Inflight>,
    /// Keys with an operation in flight, and the operations queued behind it.
    busy: HashMap<Vec<u8>, VecDeque<(usize, Plan, SimTime)>>,
    oracle: HashMap<Vec<u8>, Vec<u8>>,
    cursor: usize,
    issued: u64,
    done: u64,
    ok: u64,
    failed: u64,
    mismatches: u64,
    latencies: Vec<u64>,
    alloc_hist: BTreeMap<u32, u64>,
}

fn kv_key(i: u64) -> Vec<u8> {
    format!("user{i}").into_bytes()
}

fn setup_err(what: &str, e: OpError) -> RunError {
    RunError::Setup(format!("{what}: {e}"))
}

impl<'a> Runner<'a> {
    fn new(c: &Cluster, cfg: &SimConfig, spec: &'a WorkloadSpec) -> Self {
        let procs = (0..spec.clients)
            .map(|i| Proc {
                cn: i % c.clients().len(),
                pid: 1 + i as Pid,
                ..Default::default()
            })
            .collect();
        let max_value = match &spec.kind {
            Kind::Trace(ops) => ops
                .iter()
                .filter_map(|o| o.value_size)
                .max()
                .unwrap_or(0)
                .max(spec.value_size),
            _ => spec.value_size,
        };
        Runner {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            keys: KeyGen::new(spec.dist, spec.keys),
            procs,
            page: cfg.mn.page_size.bytes(),
            mns: c.mn_ids(),
            max_value,
            inflight: HashMap::new(),
            busy: HashMap::new(),
            oracle: HashMap::new(),
            cursor: 0,
            issued: 0,
            done: 0,
            ok: 0,
            failed: 0,
            mismatches: 0,
            latencies: Vec::new(),
            alloc_hist: BTreeMap::new(),
        }
    }

    fn kv_node(&self, key: &[u8]) -> NodeId {
        self.mns[kv::partition(key, self.mns.len())]
    }

    fn value(&mut self, len: u32) -> Vec<u8> {
        let mut v = vec![0u8; len as usize];
        self.rng.fill(&mut v[..]);
        v
    }

    /// Untimed preparation: allocations, preloaded data, service objects.
    fn setup(&mut self, c: &mut Cluster) -> Result<(), RunError> {
        let per_client = self.spec.ops.div_ceil(self.spec.clients as u64);
        match &self.spec.kind {
            Kind::Micro(m @ (Micro::Read | Micro::Write)) => {
                let pages = (self.spec.keys / self.spec.clients as u64).max(1);
                for p in &mut self.procs {
                    p.pages = pages;
                    p.base = c
                        .alloc(p.cn, p.pid, pages * self.page)
                        .map_err(|e| setup_err("alloc", e))?;
                    if *m == Micro::Read {
                        for i in 0..pages {
                            c.write(p.cn, p.pid, p.base + i * self.page, &[1])
                                .map_err(|e| setup_err("prefill", e))?;
                        }
                    }
                }
            }
            Kind::Micro(Micro::Fault) => {
                let bytes = self.spec.value_size.max(1) as u64;
                for p in &mut self.procs {
                    p.pages = per_client + 1;
                    let size = (p.pages - 1) * self.page + bytes;
                    p.base = c
                        .alloc(p.cn, p.pid, size)
                        .map_err(|e| setup_err("alloc", e))?;
                }
            }
            Kind::Micro(Micro::Alloc) | Kind::Trace(_) => {}
            Kind::Ycsb(_) => {
                for i in 0..self.spec.keys {
                    let key = kv_key(i);
                    let value = self.value(self.spec.value_size);
                    let t = c.submit(
                        0,
                        self.procs[0].pid,
                        0,
                        kv::set_op(self.kv_node(&key), &key, &value),
                    );
                    c.wait(0, t).map_err(|e| setup_err("kv load", e))?;
                    self.oracle.insert(key, value);
                }
            }
            Kind::Mv => {
                for i in 0..self.procs.len() {
                    let (cn, pid) = (self.procs[i].cn, self.procs[i].pid);
                    let node = self.mns[i % self.mns.len()];
                    let cap = (per_client + 1) as u32;
                    let t = c.submit(cn, pid, 0, mv::create_op(node, cap, self.spec.value_size));
                    let r = c.wait(cn, t).map_err(|e| setup_err("mv create", e))?;
                    let id = u64::from_be_bytes(r[..8].try_into().unwrap());
                    let first = self.value(self.spec.value_size);
                    let t = c.submit(cn, pid, 0, mv::append_op(node, id, &first));
                    c.wait(cn, t).map_err(|e| setup_err("mv append", e))?;
                    let p = &mut self.procs[i];
                    p.object = Some((node, id));
                    p.versions.insert(0, first);
                    p.version_list.push(0);
                }
            }
            Kind::Chase => {
                let len = self.spec.keys.clamp(1, MAX_CHASE_LIST);
                for i in 0..self.procs.len() {
                    let (cn, pid) = (self.procs[i].cn, self.procs[i].pid);
                    let bytes = len * CHASE_NODE as u64;
                    let base = c.alloc(cn, pid, bytes).map_err(|e| setup_err("alloc", e))?;
                    // Link the slots in a shuffled order.
                    let mut order: Vec<u64> = (0..len).collect();
                    order.shuffle(&mut self.rng);
                    let mut buf = vec![0u8; bytes as usize];
                    let mut list = Vec::with_capacity(len as usize);
                    for (pos, &slot) in order.iter().enumerate() {
                        let key = 1 + pos as u64 * 7;
                        let next = order
                            .get(pos + 1)
                            .map_or(0, |&s| base + s * CHASE_NODE as u64);
                        let at = (slot * CHASE_NODE as u64) as usize;
                        buf[at..at + 8].copy_from_slice(&key.to_le_bytes());
                        buf[at + 8..at + 16].copy_from_slice(&next.to_le_bytes());
                        list.push((key, base + slot * CHASE_NODE as u64));
                    }
                    for (n, chunk) in buf.chunks(1 << 20).enumerate() {
                        c.write(cn, pid, base + (n << 20) as u64, chunk)
                            .map_err(|e| setup_err("list build", e))?;
                    }
                    self.procs[i].list = list;
                }
            }
        }
        Ok(())
    }

    fn plan(&mut self, client: usize) -> Plan {
        let vs = self.spec.value_size;
        match &self.spec.kind {
            Kind::Micro(Micro::Read | Micro::Write) => {
                let p = &self.procs[client];
                let (base, pages) = (p.base, p.pages);
                let page = self.keys.sample(&mut self.rng) % pages;
                let span = (pages * self.page).saturating_sub(vs as u64);
                let slack = self.page.saturating_sub(vs as u64);
                let off = (page * self.page + self.rng.random_range(0..=slack)).min(span);
                if matches!(self.spec.kind, Kind::Micro(Micro::Read)) {
                    Plan::Plain(Op::Read {
                        va: base + off,
                        len: vs,
                    })
                } else {
                    Plan::Plain(Op::Write {
                        va: base + off,
                        data: vec![client as u8; vs as usize],
                    })
                }
            }
            Kind::Micro(Micro::Fault) => {
                let p = &mut self.procs[client];
                let va = p.base + p.next_fault * self.page;
                p.next_fault += 1;
                Plan::Plain(Op::Write {
                    va,
                    data: vec![7; vs.max(1) as usize],
                })
            }
            Kind::Micro(Micro::Alloc) => Plan::Alloc(vs.max(1) as u64),
            Kind::Ycsb(mix) => {
                let key = kv_key(self.keys.sample(&mut self.rng));
                if self.rng.random::<f64>() < mix.read_fraction() {
                    Plan::Get(key)
                } else {
                    let v = self.value(vs);
                    Plan::Set(key, v)
                }
            }
            Kind::Trace(ops) => {
                let op = ops[self.cursor].clone();
                self.cursor += 1;
                let key = op.key.into_bytes();
                match op.verb {
                    TraceVerb::Read => Plan::Get(key),
                    TraceVerb::Delete => Plan::Delete(key),
                    TraceVerb::Update | TraceVerb::Insert => {
                        let v = self.value(op.value_size.unwrap_or(vs));
                        Plan::Set(key, v)
                    }
                }
            }
            Kind::Mv => {
                if self.rng.random_bool(0.5) {
                    let v = self.value(vs);
                    Plan::MvAppend(v)
                } else {
                    let p = &self.procs[client];
                    let v = p.version_list[self.rng.random_range(0..p.version_list.len())];
                    Plan::MvRead(v)
                }
            }
            Kind::Chase => {
                let list = &self.procs[client].list;
                let (key, va) =
                    list[(self.keys.sample(&mut self.rng) % list.len() as u64) as usize];
                Plan::Chase(key, va)
            }
        }
    }

    fn op_for(&self, client: usize, plan: &Plan) -> Op {
        let p = &self.procs[client];
        match plan {
            Plan::Plain(op) => op.clone(),
            Plan::Alloc(size) => Op::Alloc {
                size: *size,
                perms: dmsim::types::Perms::RW,
            },
            Plan::Get(k) => kv::get_op(self.kv_node(k), k, self.max_value),
            Plan::Set(k, v) => kv::set_op(self.kv_node(k), k, v),
            Plan::Delete(k) => kv::delete_op(self.kv_node(k), k),
            Plan::MvAppend(v) => {
                let (node, id) = p.object.unwrap();
                mv::append_op(node, id, v)
            }
            Plan::MvRead(v) => {
                let (node, id) = p.object.unwrap();
                mv::read_op(node, id, *v, self.spec.value_size)
            }
            Plan::Chase(key, _) => ChaseRequest {
                head: p.list[0].1,
                key: *key,
                key_offset: 0,
                next_offset: 8,
                max_hops: p.list.len() as u32,
                node_len: CHASE_NODE,
            }
            .op(),
        }
    }

    fn issue(&mut self, c: &mut Cluster, client: usize) {
        if self.issued >= self.spec.ops {
            return;
        }
        self.issued += 1;
        let plan = self.plan(client);
        self.start(c, client, plan, c.now());
    }

    fn start(&mut self, c: &mut Cluster, client: usize, plan: Plan, arrival: SimTime) {
        if let Some(key) = plan.key() {
            if let Some(q) = self.busy.get_mut(key) {
                q.push_back((client, plan, arrival));
                return;
            }
            self.busy.insert(key.to_vec(), VecDeque::new());
        }
        let op = self.op_for(client, &plan);
        let p = &self.procs[client];
        let t = c.submit(p.cn, p.pid, 0, op);
        self.inflight.insert(
            (p.cn, t),
            Inflight {
                client,
                plan,
                arrival,
            },
        );
    }

    fn record(&mut self, client: usize, plan: &Plan, result: Result<Vec<u8>, OpError>) {
        let not_found = Err(OpError::Status(Status::NotFound));
        let outcome_ok = match (plan, &result) {
            (Plan::Get(k), Ok(v)) => {
                if self.oracle.get(k) != Some(v) {
                    self.mismatches += 1;
                }
                true
            }
            (Plan::Get(k), r) | (Plan::Delete(k), r) if *r == not_found => {
                if self.oracle.contains_key(k) {
                    self.mismatches += 1;
                }
                true
            }
            (Plan::Set(k, v), Ok(_)) => {
                self.oracle.insert(k.clone(), v.clone());
                true
            }
            (Plan::Delete(k), Ok(_)) => {
                if self.oracle.remove(k).is_none() {
                    self.mismatches += 1;
                }
                true
            }
            (Plan::MvAppend(v), Ok(r)) => {
                let version = u64::from_be_bytes(r[..8].try_into().unwrap());
                let p = &mut self.procs[client];
                p.versions.insert(version, v.clone());
                p.version_list.push(version);
                true
            }
            (Plan::MvRead(version), Ok(r)) => {
                if self.procs[client].versions.get(version) != Some(r) {
                    self.mismatches += 1;
                }
                true
            }
            (Plan::Chase(_, va), Ok(r)) => {
                if chase::decode_reply(r).map(|(at, _)| at) != Some(*va) {
                    self.mismatches += 1;
                }
                true
            }
            (Plan::Alloc(_), Ok(r)) => {
                let retries = u32::from_be_bytes(r[8..12].try_into().unwrap());
                *self.alloc_hist.entry(retries).or_default() += 1;
                true
            }
            (_, Ok(_)) => true,
            (_, Err(_)) => false,
        };
        if outcome_ok {
            self.ok += 1;
        } else {
            self.failed += 1;
        }
    }
}

impl Driver for Runner<'_> {
    fn completed(&mut self, c: &mut Cluster, cn: usize, done: Completion) {
        c.reap(cn, done.ticket);
        let Some(f) = self.inflight.remove(&(cn, done.ticket)) else {
            return;
        };
        self.done += 1;
        self.latencies.push(done.finished - f.arrival);
        self.record(f.client, &f.plan, done.result);
        if let Some(key) = f.plan.key() {
            let mut waiting = self.busy.remove(key).unwrap_or_default();
            if let Some((client, plan, arrival)) = waiting.pop_front() {
                self.start(c, client, plan, arrival);
                self.busy.insert(key.to_vec(), waiting);
            }
        }
        if self.spec.arrival == Arrival::Closed {
            self.issue(c, f.client);
        }
    }

    fn timer(&mut self, c: &mut Cluster, _cn: usize, token: u64) {
        let client = (token % self.spec.clients as u64) as usize;
        self.issue(c, client);
        if self.issued < self.spec.ops {
            if let Arrival::Open(gap) = self.spec.arrival {
                let next = self.issued;
                let wait = Exp::new(1.0 / gap)
                    .unwrap()
                    .sample(&mut self.rng)
                    .round()
                    .max(1.0) as SimTime;
                let cn = self.procs[(next % self.spec.clients as u64) as usize].cn;
                c.schedule(cn, c.now() + wait, next);
            }
        }
    }

    fn finished(&self) -> bool {
        self.done >= self.spec.ops
    }
}

#[derive(Default, Clone, Copy)]
struct Counters {
    transmissions: u64,
    retries: u64,
    timeouts: u64,
    nacks: u64,
    faults: u64,
    fault_stalls: u64,
    tlb_miss_translations: u64,
    bucket_fetches: u64,
}

fn counters(c: &Cluster) -> Counters {
    let mut k = Counters::default();
    for cl in c.clients() {
        let s = cl.stats();
        k.transmissions += s.transmissions;
        k.retries += s.retries;
        k.timeouts += s.timeouts;
        k.nacks += s.nacks;
    }
    for m in c.mns() {
        let s = m.stats();
        k.faults += s.faults;
        k.fault_stalls += s.fault_stalls;
        k.tlb_miss_translations += s.tlb_miss_translations;
        k.bucket_fetches += m.core().table().bucket_fetches();
    }
    k
}

fn translations(c: &Cluster) -> Vec<MnTranslations> {
    c.mns()
        .iter()
        .map(|m| MnTranslations {
            tlb_miss_translations: m.stats().tlb_miss_translations,
            bucket_fetches: m.core().table().bucket_fetches(),
        })
        .collect()
}

/// Runs `spec` on a fresh cluster built from `cfg`.
pub fn run(cfg: &SimConfig, spec: &WorkloadSpec) -> Result<RunReport, RunError> {
    let mut cfg = cfg.clone();
    cfg.clib.log_cwnd = true;
    cfg.cluster.compute_nodes = cfg.cluster.compute_nodes.max(1);
    let mut c = Cluster::new(&cfg);
    let mut r = Runner::new(&c, &cfg, spec);
    r.setup(&mut c)?;
    c.run_until_idle();

    let before = counters(&c);
    let per_mn_before = translations(&c);
    let start = c.now();
    let aimd_start: Vec<usize> = c.clients().iter().map(|cl| cl.aimd_log().len()).collect();
    match spec.arrival {
        Arrival::Closed => {
            for i in 0..spec.clients {
                r.issue(&mut c, i);
            }
        }
        Arrival::Open(_) => {
            if spec.ops > 0 {
                c.schedule(r.procs[0].cn, start, 0);
            }
        }
    }
    c.drive(&mut r, SimTime::MAX);
    let end = c.now();
    let after = counters(&c);
    let per_mn = translations(&c)
        .into_iter()
        .zip(per_mn_before)
        .map(|(a, b)| MnTranslations {
            tlb_miss_translations: a.tlb_miss_translations - b.tlb_miss_translations,
            bucket_fetches: a.bucket_fetches - b.bucket_fetches,
        })
        .collect();

    let mut points = Vec::new();
    for (i, cl) in c.clients().iter().enumerate() {
        for e in &cl.aimd_log()[aimd_start[i]..] {
            points.push(CwndPoint {
                time: e.time - start,
                client: i,
                node: e.node.0,
                cwnd: e.after,
            });
        }
    }
    points.sort_by_key(|a| (a.time, a.client, a.node));
    let stride = points.len().div_ceil(MAX_CWND_POINTS).max(1);
    let cwnd = points.into_iter().step_by(stride).collect();

    let duration = end - start;
    Ok(RunReport {
        workload: spec.kind.name().to_string(),
        seed: spec.seed,
        clients: spec.clients,
        ops_issued: r.issued,
        ops_ok: r.ok,
        ops_failed: r.failed + (r.issued - r.done),
        latency_ns: LatencySummary::of(&mut r.latencies),
        sim_duration_ns: duration,
        throughput: if duration == 0 {
            0.0
        } else {
            r.done as f64 * 1e9 / duration as f64
        },
        transmissions: after.transmissions - before.transmissions,
        retries: after.retries - before.retries,
        timeouts: after.timeouts - before.timeouts,
        nacks: after.nacks - before.nacks,
        faults: after.faults - before.faults,
        fault_stalls: after.fault_stalls - before.fault_stalls,
        tlb_miss_translations: after.tlb_miss_translations - before.tlb_miss_translations,
        bucket_fetches: after.bucket_fetches - before.bucket_fetches,
        mn_translations: per_mn,
        verify_mismatches: r.mismatches,
        alloc_retry_histogram: r.alloc_hist,
        mn_control_state_bytes: c.mns().iter().map(|m| m.control_state().len()).collect(),
        cwnd,
    })
}
