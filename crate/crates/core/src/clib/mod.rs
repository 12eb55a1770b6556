//! Compute-node client library.
//!
//! A [`Client`] turns application operations into request/response pairs,
//! splits them at region boundaries, orders them by page-level hazards,
//! admits them under a per-node congestion window and a per-process incast
//! window, and retries them under fresh ids until a response arrives.
//!
//! Like the memory node it is a pure state machine: calls return nothing and
//! queue [`Emit`]s and [`Completion`]s for the owner to drain.

pub mod congestion;
pub mod deps;


use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::fast_path::Emit;
use crate::types::{region_of, NodeId, PageSize, Perms, Pid, SimTime, Va, REGION_SIZE};
use crate::wire::{codec, fragment, Header, Message, Opcode, Status, RESPONSE_BIT};
use congestion::{Aimd, AimdParams, RttEstimator};
use deps::{Barrier, Footprint, Hazard, Hazards, Scan};

/// Timer tokens with this bit set wake the admission loop; tokens with no
/// kind bits are per-attempt timeouts keyed by request id.
pub const PUMP_TIMER: u64 = 1 << 62;
/// Tokens with this bit set belong to the application driving the client.
pub const APP_TIMER: u64 = 2 << 62;
const TIMER_KIND: u64 = 3 << 62;

/// Region hops an allocation may take before giving up.
const MAX_ALLOC_REGIONS: u32 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ClibConfig {
    pub timeout_ns: SimTime,
    /// Retries after the original transmission before a request fails.
    pub max_retries: u32,
    pub cwnd_init: f64,
    pub cwnd_floor: f64,
    pub cwnd_max: f64,
    pub additive_step: f64,
    pub multiplicative_factor: f64,
    /// Target delay as a multiple of the handshake RTT.
    pub target_delay_factor: f64,
    pub rtt_alpha: f64,
    pub iwnd_bytes: u64,
    pub mtu: usize,
    pub max_request_bytes: usize,
    /// Granularity of dependency tracking.
    pub page_size: PageSize,
    pub log_cwnd: bool,
}

impl Default for ClibConfig {
    fn default() -> Self {
        ClibConfig {
            timeout_ns: 10_000_000,
            max_retries: 3,
            cwnd_init: 8.0,
            cwnd_floor: 1.0 / 64.0,
            cwnd_max: 64.0,
            additive_step: 1.0,
            multiplicative_factor: 0.7,
            target_delay_factor: 3.0,
            rtt_alpha: 0.125,
            iwnd_bytes: 256 * 1024,
            mtu: crate::wire::DEFAULT_MTU,
            max_request_bytes: 1 << 20,
            page_size: PageSize::Size4M,
            log_cwnd: false,
        }
    }
}

impl ClibConfig {
    pub fn aimd(&self) -> AimdParams {
        AimdParams {
            initial: self.cwnd_init,
            floor: self.cwnd_floor,
            max: self.cwnd_max,
            additive_step: self.additive_step,
            multiplicative_factor: self.multiplicative_factor,
        }
    }
}

/// One application-level operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Read {
        va: Va,
        len: u32,
    },
    Write {
        va: Va,
        data: Vec<u8>,
    },
    FetchAdd {
        va: Va,
        delta: u64,
    },
    CompareSwap {
        va: Va,
        expect: u64,
        new: u64,
    },
    TestSet {
        va: Va,
    },
    Lock {
        va: Va,
    },
    Unlock {
        va: Va,
    },
    /// Fence at the node owning `va`.
    Fence {
        va: Va,
    },
    Alloc {
        size: u64,
        perms: Perms,
    },
    Free {
        va: Va,
        size: u64,
    },
    /// Extension call, sent to `node` or else to the owner of `va`.
    Ext {
        node: Option<NodeId>,
        va: Va,
        code: u8,
        payload: Vec<u8>,
        mutates: bool,
        reply_bytes: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ticket(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpError {
    #[error("memory node returned {0}")]
    Status(Status),
    #[error("no response after {0} attempts")]
    Timeout(u32),
}

pub type OpResult = Result<Vec<u8>, OpError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandleState {
    Pending,
    Done(OpResult),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub ticket: Ticket,
    pub pid: Pid,
    pub thread: u32,
    pub submitted: SimTime,
    pub finished: SimTime,
    pub retries: u32,
    pub result: OpResult,
}

/// Window state at the moment a request left the client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwndSample {
    pub time: SimTime,
    pub node: NodeId,
    pub request_id: u64,
    pub cwnd: f64,
    pub srtt: f64,
    pub retry: bool,
}

/// One window update. `rtt` is `None` for a timeout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AimdEvent {
    pub time: SimTime,
    pub node: NodeId,
    pub rtt: Option<SimTime>,
    pub target: f64,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionView {
    pub cwnd: f64,
    pub srtt: Option<f64>,
    pub base_rtt: Option<SimTime>,
    pub target: f64,
    pub inflight: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub submitted: u64,
    pub transmissions: u64,
    pub packets: u64,
    pub retries: u64,
    pub timeouts: u64,
    pub nacks: u64,
    pub corrupted_responses: u64,
    pub completed: u64,
    pub failed: u64,
    pub stale_responses: u64,
    pub max_inflight_bytes: u64,
}

#[derive(Debug)]
struct OpEntry {
    pid: Pid,
    thread: u32,
    submitted: SimTime,
    parts: Vec<Option<OpResult>>,
    remaining: usize,
    retries: u32,
    state: HandleState,
}

#[derive(Debug, PartialEq, Eq)]
enum PingState {
    Idle,
    Sent,
    Ready,
}

#[derive(Debug)]
struct Session {
    aimd: Aimd,
    rtt: RttEstimator,
    base_rtt: Option<SimTime>,
    target: f64,
    inflight: usize,
    last_send: Option<SimTime>,
    ping: PingState,
}

#[derive(Debug, Default)]
struct ProcState {
    inflight_bytes: u64,
    inflight: usize,
    alloc_region: u64,
}

#[derive(Debug)]
struct Req {
    ticket: Ticket,
    part: usize,
    pid: Pid,
    thread: u32,
    opcode: Opcode,
    va: Va,
    total_len: u32,
    payload: Vec<u8>,
    fixed: Option<NodeId>,
    footprint: Footprint,
    expect_bytes: u64,
    dest: Option<NodeId>,
    original: u64,
    current: u64,
    attempts: u32,
    sent: HashMap<u64, SimTime>,
    frags: HashMap<u64, Vec<Option<Vec<u8>>>>,
    ping: bool,
    region_hops: u32,
}

impl Req {
    fn region(&self) -> Option<(Pid, u64)> {
        self.fixed.is_none().then(|| (self.pid, region_of(self.va)))
    }
}

pub struct Client {
    id: NodeId,
    controller: NodeId,
    cfg: ClibConfig,
    id_base: u64,
    next_id: u64,
    next_key: u64,
    next_ticket: u64,
    ops: HashMap<Ticket, OpEntry>,
    reqs: HashMap<u64, Req>,
    attempt_of: HashMap<u64, u64>,
    pending: VecDeque<u64>,
    sessions: BTreeMap<NodeId, Session>,
    procs: HashMap<Pid, ProcState>,
    outstanding: HashMap<(Pid, u32), usize>,
    hazards: Hazards,
    routes: HashMap<(Pid, u64), NodeId>,
    assigning: HashSet<(Pid, u64)>,
    held: HashMap<(Pid, u64), bool>,
    region_inflight: HashMap<(Pid, u64), usize>,
    pump_at: Option<SimTime>,
    out: Vec<Emit>,
    done: Vec<Completion>,
    cwnd_log: Vec<CwndSample>,
    aimd_log: Vec<AimdEvent>,
    stats: ClientStats,
}

fn be_u64(v: u64) -> Vec<u8> {
    v.to_be_bytes().to_vec()
}

impl Client {
    /// `index` distinguishes clients in request ids; it must be unique per
    /// cluster.
    pub fn new(id: NodeId, index: u16, controller: NodeId, cfg: ClibConfig) -> Self {
        Client {
            id,
            controller,
            cfg,
            id_base: (index as u64 + 1) << 48,
            next_id: 0,
            next_key: 0,
            next_ticket: 1,
            ops: HashMap::new(),
            reqs: HashMap::new(),
            attempt_of: HashMap::new(),
            pending: VecDeque::new(),
            sessions: BTreeMap::new(),
            procs: HashMap::new(),
            outstanding: HashMap::new(),
            hazards: Hazards::default(),
            routes: HashMap::new(),
            assigning: HashSet::new(),
            held: HashMap::new(),
            region_inflight: HashMap::new(),
            pump_at: None,
            out: Vec::new(),
            done: Vec::new(),
            cwnd_log: Vec::new(),
            aimd_log: Vec::new(),
            stats: ClientStats::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ClibConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    pub fn take_emits(&mut self) -> Vec<Emit> {
        std::mem::take(&mut self.out)
    }

    pub fn take_completions(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.done)
    }

    pub fn cwnd_log(&self) -> &[CwndSample] {
        &self.cwnd_log
    }

    pub fn aimd_log(&self) -> &[AimdEvent] {
        &self.aimd_log
    }

    pub fn session(&self, node: NodeId) -> Option<SessionView> {
        self.sessions.get(&node).map(|s| SessionView {
            cwnd: s.aimd.cwnd(),
            srtt: s.rtt.srtt(),
            base_rtt: s.base_rtt,
            target: s.target,
            inflight: s.inflight,
        })
    }

    pub fn route(&self, pid: Pid, va: Va) -> Option<NodeId> {
        self.routes.get(&(pid, region_of(va))).copied()
    }

    pub fn poll(&self, ticket: Ticket) -> Option<HandleState> {
        self.ops.get(&ticket).map(|o| o.state.clone())
    }

    /// Drops a finished handle. Returns its result.
    pub fn reap(&mut self, ticket: Ticket) -> Option<OpResult> {
        match self.ops.get(&ticket)?.state {
            HandleState::Pending => None,
            HandleState::Done(_) => match self.ops.remove(&ticket)?.state {
                HandleState::Done(r) => Some(r),
                HandleState::Pending => None,
            },
        }
    }

    /// True when the thread has no submitted operation left unfinished.
    pub fn thread_idle(&self, pid: Pid, thread: u32) -> bool {
        self.outstanding.get(&(pid, thread)).copied().unwrap_or(0) == 0
    }

    pub fn idle(&self) -> bool {
        self.reqs.is_empty()
    }

    pub fn inflight(&self) -> usize {
        self.reqs
            .values()
            .filter(|r| r.dest.is_some() && !r.ping)
            .count()
    }

    fn page_shift(&self) -> u32 {
        self.cfg.page_size.shift()
    }

    fn pages(&self, va: Va, len: u64) -> Vec<u64> {
        if len == 0 {
            return Vec::new();
        }
        let s = self.page_shift();
        ((va >> s)..=((va + len - 1) >> s)).collect()
    }

    /// Queues an operation and returns its handle.
    pub fn submit(&mut self, now: SimTime, pid: Pid, thread: u32, op: Op) -> Ticket {
        let ticket = Ticket(self.next_ticket);
        self.next_ticket += 1;
        self.stats.submitted += 1;
        let parts = match self.plan(pid, thread, op) {
            Ok(parts) => parts,
            Err(e) => {
                self.ops.insert(
                    ticket,
                    OpEntry {
                        pid,
                        thread,
                        submitted: now,
                        parts: Vec::new(),
                        remaining: 0,
                        retries: 0,
                        state: HandleState::Pending,
                    },
                );
                self.finish_op(ticket, now, Err(e));
                return ticket;
            }
        };
        if parts.is_empty() {
            self.ops.insert(
                ticket,
                OpEntry {
                    pid,
                    thread,
                    submitted: now,
                    parts: Vec::new(),
                    remaining: 0,
                    retries: 0,
                    state: HandleState::Pending,
                },
            );
            self.finish_op(ticket, now, Ok(Vec::new()));
            return ticket;
        }
        self.ops.insert(
            ticket,
            OpEntry {
                pid,
                thread,
                submitted: now,
                parts: vec![None; parts.len()],
                remaining: parts.len(),
                retries: 0,
                state: HandleState::Pending,
            },
        );
        *self.outstanding.entry((pid, thread)).or_default() += parts.len();
        for (i, mut req) in parts.into_iter().enumerate() {
            req.ticket = ticket;
            req.part = i;
            let key = self.next_key;
            self.next_key += 1;
            self.reqs.insert(key, req);
            self.pending.push_back(key);
        }
        self.pump(now);
        ticket
    }

    /// Builds the wire requests for an operation.
    fn plan(&mut self, pid: Pid, thread: u32, op: Op) -> Result<Vec<Req>, OpError> {
        let invalid = OpError::Status(Status::InvalidArgument);
        let mk = |opcode, va, payload: Vec<u8>, total_len: u32, hazard, pages, barrier| Req {
            ticket: Ticket(0),
            part: 0,
            pid,
            thread,
            opcode,
            va,
            total_len,
            payload,
            fixed: None,
            footprint: Footprint {
                pid,
                thread,
                hazard,
                pages,
                barrier,
            },
            expect_bytes: 0,
            dest: None,
            original: 0,
            current: 0,
            attempts: 0,
            sent: HashMap::new(),
            frags: HashMap::new(),
            ping: false,
            region_hops: 0,
        };
        let single_region = |va: Va, len: u64| len == 0 || region_of(va) == region_of(va + len - 1);
        let max = self.cfg.max_request_bytes as u64;
        Ok(match op {
            Op::Read { va, len } => {
                if len as u64 > max {
                    return Err(invalid);
                }
                split(va, len as u64)
                    .into_iter()
                    .map(|(va, n)| {
                        let mut r = mk(
                            Opcode::Read,
                            va,
                            Vec::new(),
                            n as u32,
                            Hazard::Read,
                            self.pages(va, n),
                            Barrier::None,
                        );
                        r.expect_bytes = n;
                        r
                    })
                    .collect()
            }
            Op::Write { va, data } => {
                if data.len() as u64 > max {
                    return Err(invalid);
                }
                let mut off = 0usize;
                split(va, data.len() as u64)
                    .into_iter()
                    .map(|(va, n)| {
                        let chunk = data[off..off + n as usize].to_vec();
                        off += n as usize;
                        mk(
                            Opcode::Write,
                            va,
                            chunk,
                            n as u32,
                            Hazard::Write,
                            self.pages(va, n),
                            Barrier::None,
                        )
                    })
                    .collect()
            }
            Op::FetchAdd { .. } | Op::CompareSwap { .. } | Op::TestSet { .. } => {
                let (opcode, va, payload) = match op {
                    Op::FetchAdd { va, delta } => (Opcode::FetchAdd, va, be_u64(delta)),
                    Op::CompareSwap { va, expect, new } => {
                        let mut p = be_u64(expect);
                        p.extend(be_u64(new));
                        (Opcode::CompareSwap, va, p)
                    }
                    Op::TestSet { va } => (Opcode::TestSet, va, Vec::new()),
                    _ => unreachable!(),
                };
                if !single_region(va, 8) {
                    return Err(invalid);
                }
                let len = payload.len() as u32;
                let mut r = mk(
                    opcode,
                    va,
                    payload,
                    len,
                    Hazard::Write,
                    self.pages(va, 8),
                    Barrier::None,
                );
                r.expect_bytes = 8;
                vec![r]
            }
            Op::Lock { va } => vec![mk(
                Opcode::Lock,
                va,
                Vec::new(),
                0,
                Hazard::Write,
                self.pages(va, 8),
                Barrier::Order,
            )],
            Op::Unlock { va } => vec![mk(
                Opcode::Unlock,
                va,
                Vec::new(),
                0,
                Hazard::Write,
                self.pages(va, 8),
                Barrier::Full,
            )],
            Op::Fence { va } => vec![mk(
                Opcode::Fence,
                va,
                Vec::new(),
                0,
                Hazard::Read,
                Vec::new(),
                Barrier::Order,
            )],
            Op::Alloc { size, perms } => {
                if size == 0 || size > REGION_SIZE {
                    return Err(invalid);
                }
                let region = self.procs.entry(pid).or_default().alloc_region;
                let mut p = Vec::new();
                codec::put_u64(&mut p, size);
                p.push(perms.bits());
                let mut r = mk(
                    Opcode::Alloc,
                    region * REGION_SIZE,
                    p,
                    9,
                    Hazard::Read,
                    Vec::new(),
                    Barrier::None,
                );
                r.expect_bytes = 12;
                vec![r]
            }
            Op::Free { va, size } => {
                if !single_region(va, size) {
                    return Err(invalid);
                }
                let mut p = Vec::new();
                codec::put_u64(&mut p, size);
                vec![mk(
                    Opcode::Free,
                    va,
                    p,
                    8,
                    Hazard::Free,
                    self.pages(va, size),
                    Barrier::None,
                )]
            }
            Op::Ext {
                node,
                va,
                code,
                payload,
                mutates,
                reply_bytes,
            } => {
                if payload.len() > self.cfg.mtu || code > crate::wire::EXT_MAX {
                    return Err(invalid);
                }
                let pseudo = match node {
                    Some(n) => u64::MAX - n.0 as u64,
                    None => u64::MAX - 0x1_0000 - region_of(va),
                };
                let hazard = if mutates { Hazard::Write } else { Hazard::Read };
                let len = payload.len() as u32;
                let mut r = mk(
                    Opcode::Ext(code),
                    va,
                    payload,
                    len,
                    hazard,
                    vec![pseudo],
                    Barrier::None,
                );
                r.fixed = node;
                r.expect_bytes = reply_bytes as u64;
                vec![r]
            }
        })
    }

    /// Admits pending requests in FIFO order as far as hazards and windows
    /// allow.
    fn pump(&mut self, now: SimTime) {
        let mut scan = Scan::default();
        let mut blocked_nodes: HashSet<NodeId> = HashSet::new();
        let mut blocked_pids: HashSet<Pid> = HashSet::new();
        let mut wake: Option<SimTime> = None;
        let mut keep = VecDeque::with_capacity(self.pending.len());
        let pending = std::mem::take(&mut self.pending);
        let mut need_assign = Vec::new();
        let mut need_ping = Vec::new();
        for key in pending {
            let req = &self.reqs[&key];
            let dest = match req.fixed {
                Some(n) => Some(n),
                None => {
                    let region = (req.pid, region_of(req.va));
                    if self.held.contains_key(&region) {
                        None
                    } else {
                        let r = self.routes.get(&region).copied();
                        if r.is_none() && !self.assigning.contains(&region) {
                            self.assigning.insert(region);
                            need_assign.push(region);
                        }
                        r
                    }
                }
            };
            let admit = dest.is_some_and(|dest| {
                if blocked_nodes.contains(&dest) || blocked_pids.contains(&req.pid) {
                    return false;
                }
                if !self.hazards.admissible(&req.footprint, &scan) {
                    return false;
                }
                let s = self
                    .sessions
                    .entry(dest)
                    .or_insert_with(|| new_session(&self.cfg));
                if s.ping != PingState::Ready {
                    if s.ping == PingState::Idle {
                        s.ping = PingState::Sent;
                        need_ping.push(dest);
                    }
                    blocked_nodes.insert(dest);
                    return false;
                }
                if s.inflight >= s.aimd.window() {
                    blocked_nodes.insert(dest);
                    return false;
                }
                if let (Some(gap), Some(last)) = (s.aimd.pacing_gap(srtt(s)), s.last_send) {
                    if now < last + gap {
                        wake = Some(wake.map_or(last + gap, |w: SimTime| w.min(last + gap)));
                        blocked_nodes.insert(dest);
                        return false;
                    }
                }
                let p = self.procs.get(&req.pid);
                let (bytes, count) = p.map_or((0, 0), |p| (p.inflight_bytes, p.inflight));
                if count > 0 && bytes + req.expect_bytes > self.cfg.iwnd_bytes {
                    blocked_pids.insert(req.pid);
                    return false;
                }
                true
            });
            if admit {
                self.admit(key, dest.unwrap(), now);
            } else {
                scan.defer(&self.reqs[&key].footprint);
                keep.push_back(key);
            }
        }
        self.pending = keep;
        for region in need_assign {
            self.send_assign(now, region);
        }
        for node in need_ping {
            self.start_ping(now, node);
        }
        if let Some(w) = wake {
            if self.pump_at.is_none_or(|p| w < p) {
                self.pump_at = Some(w);
                self.out.push(Emit::Timer {
                    at: w,
                    token: PUMP_TIMER,
                });
            }
        }
    }

    fn admit(&mut self, key: u64, dest: NodeId, now: SimTime) {
        let req = self.reqs.get_mut(&key).unwrap();
        req.dest = Some(dest);
        self.hazards.add(&req.footprint);
        let s = self.sessions.get_mut(&dest).unwrap();
        debug_assert!(s.inflight < s.aimd.window());
        s.inflight += 1;
        let p = self.procs.entry(req.pid).or_default();
        p.inflight += 1;
        p.inflight_bytes += req.expect_bytes;
        debug_assert!(p.inflight == 1 || p.inflight_bytes <= self.cfg.iwnd_bytes);
        self.stats.max_inflight_bytes = self.stats.max_inflight_bytes.max(p.inflight_bytes);
        if let Some(region) = req.region() {
            *self.region_inflight.entry(region).or_default() += 1;
        }
        self.transmit(key, now);
    }

    /// Sends the request under a fresh id.
    fn transmit(&mut self, key: u64, now: SimTime) {
        self.next_id += 1;
        let id = self.id_base | self.next_id;
        let req = self.reqs.get_mut(&key).unwrap();
        let dest = req.dest.unwrap();
        let retry = req.original != 0;
        if !retry {
            req.original = id;
        }
        req.current = id;
        req.attempts += 1;
        req.sent.insert(id, now);
        self.attempt_of.insert(id, key);
        let mut h = Header::request(req.opcode, req.pid, id, req.va, req.total_len);
        h.retry_of = if retry { req.original } else { 0 };
        let frags: Vec<&[u8]> = if req.opcode == Opcode::Write {
            fragment(&req.payload, self.cfg.mtu)
        } else {
            vec![&req.payload[..]]
        };
        h.frag_count = frags.len() as u16;
        for (i, f) in frags.into_iter().enumerate() {
            h.frag_seq = i as u16;
            self.out.push(Emit::Send {
                dst: dest,
                depart: now,
                bytes: Message::request(h, f.to_vec()).encode(),
            });
            self.stats.packets += 1;
        }
        self.stats.transmissions += 1;
        self.out.push(Emit::Timer {
            at: now + self.cfg.timeout_ns,
            token: id,
        });
        if !req.ping {
            let s = self.sessions.get_mut(&dest).unwrap();
            s.last_send = Some(now);
            if self.cfg.log_cwnd {
                self.cwnd_log.push(CwndSample {
                    time: now,
                    node: dest,
                    request_id: id,
                    cwnd: s.aimd.cwnd(),
                    srtt: srtt(s),
                    retry,
                });
            }
        }
    }

    fn start_ping(&mut self, now: SimTime, node: NodeId) {
        let key = self.next_key;
        self.next_key += 1;
        self.reqs.insert(
            key,
            Req {
                ticket: Ticket(0),
                part: 0,
                pid: 0,
                thread: 0,
                opcode: Opcode::Ping,
                va: 0,
                total_len: 0,
                payload: Vec::new(),
                fixed: Some(node),
                footprint: Footprint {
                    pid: 0,
                    thread: 0,
                    hazard: Hazard::Read,
                    pages: Vec::new(),
                    barrier: Barrier::None,
                },
                expect_bytes: 0,
                dest: Some(node),
                original: 0,
                current: 0,
                attempts: 0,
                sent: HashMap::new(),
                frags: HashMap::new(),
                ping: true,
                region_hops: 0,
            },
        );
        self.transmit(key, now);
    }

    fn send_assign(&mut self, now: SimTime, (pid, region): (Pid, u64)) {
        let h = Header::request(Opcode::Assign, pid, 0, region * REGION_SIZE, 0);
        let mut p = Vec::new();
        codec::put_u32(&mut p, pid);
        codec::put_u64(&mut p, region);
        self.out.push(Emit::Send {
            dst: self.controller,
            depart: now,
            bytes: Message::request(h, p).encode(),
        });
    }

    pub fn on_timer(&mut self, now: SimTime, token: u64) {
        match token & TIMER_KIND {
            0 => {
                let Some(&key) = self.attempt_of.get(&token) else {
                    return;
                };
                if self.reqs[&key].current != token {
                    return;
                }
                self.stats.timeouts += 1;
                if let Some(d) = self.reqs[&key].dest {
                    if let Some(s) = self.sessions.get_mut(&d) {
                        let before = s.aimd.cwnd();
                        s.aimd.on_timeout();
                        if self.cfg.log_cwnd {
                            self.aimd_log.push(AimdEvent {
                                time: now,
                                node: d,
                                rtt: None,
                                target: s.target,
                                before,
                                after: s.aimd.cwnd(),
                            });
                        }
                    }
                }
                self.retry(key, now);
            }
            PUMP_TIMER => {
                if self.pump_at == Some(now) {
                    self.pump_at = None;
                }
                self.pump(now);
            }
            _ => {}
        }
    }

    pub fn on_packet(&mut self, now: SimTime, src: NodeId, bytes: &[u8], corrupted: bool) {
        let Ok(h) = Header::parse(bytes) else {
            return;
        };
        if h.opcode & RESPONSE_BIT == 0 {
            if src == self.controller {
                self.on_control(now, &h, &bytes[crate::wire::HEADER_LEN..]);
            }
            return;
        }
        if h.op() == Opcode::Assign {
            if let Ok(m) = Message::decode_response(bytes) {
                self.on_assigned(now, &m);
            }
            return;
        }
        let Some(&key) = self.attempt_of.get(&h.request_id) else {
            self.stats.stale_responses += 1;
            return;
        };
        let current = self.reqs[&key].current == h.request_id;
        if corrupted {
            self.stats.corrupted_responses += 1;
            if current {
                self.retry(key, now);
            }
            return;
        }
        let Ok(m) = Message::decode_response(bytes) else {
            return;
        };
        let status = m.status.unwrap_or(Status::Ok);
        if status == Status::Nack {
            self.stats.nacks += 1;
            if current {
                self.retry(key, now);
            }
            return;
        }
        let req = self.reqs.get_mut(&key).unwrap();
        let count = h.frag_count.max(1) as usize;
        let buf = req
            .frags
            .entry(h.request_id)
            .or_insert_with(|| vec![None; count]);
        if buf.len() != count || h.frag_seq as usize >= count {
            return;
        }
        buf[h.frag_seq as usize] = Some(m.payload);
        if buf.iter().any(Option::is_none) {
            return;
        }
        let data: Vec<u8> = req
            .frags
            .remove(&h.request_id)
            .unwrap()
            .into_iter()
            .flatten()
            .flatten()
            .collect();
        let rtt = now - req.sent[&h.request_id];
        self.on_response(key, now, rtt, status, data);
    }

    fn on_response(&mut self, key: u64, now: SimTime, rtt: SimTime, status: Status, data: Vec<u8>) {
        let req = &self.reqs[&key];
        let dest = req.dest.unwrap();
        let s = self.sessions.get_mut(&dest).unwrap();
        if req.ping {
            s.base_rtt = Some(rtt);
            s.rtt.sample(rtt as f64);
            s.target = self.cfg.target_delay_factor * rtt as f64;
            s.ping = PingState::Ready;
            self.drop_req(key);
            self.pump(now);
            return;
        }
        s.rtt.sample(rtt as f64);
        let before = s.aimd.cwnd();
        s.aimd.on_sample(rtt as f64, s.target);
        if self.cfg.log_cwnd {
            self.aimd_log.push(AimdEvent {
                time: now,
                node: dest,
                rtt: Some(rtt),
                target: s.target,
                before,
                after: s.aimd.cwnd(),
            });
        }

        if status == Status::OutOfVa
            && req.opcode == Opcode::Alloc
            && req.region_hops < MAX_ALLOC_REGIONS
        {
            // Move on to the next region of the process's address space.
            let next = region_of(req.va) + 1;
            let pid = req.pid;
            self.release_admission(key);
            let p = self.procs.entry(pid).or_default();
            p.alloc_region = p.alloc_region.max(next);
            let req = self.reqs.get_mut(&key).unwrap();
            for id in req.sent.keys() {
                self.attempt_of.remove(id);
            }
            req.va = next * REGION_SIZE;
            req.region_hops += 1;
            req.original = 0;
            req.current = 0;
            req.attempts = 0;
            req.sent.clear();
            req.frags.clear();
            req.dest = None;
            self.pending.push_front(key);
            self.pump(now);
            return;
        }
        let result = if status == Status::Ok {
            Ok(data)
        } else {
            Err(OpError::Status(status))
        };
        self.finish_part(key, now, result);
    }

    fn retry(&mut self, key: u64, now: SimTime) {
        let req = &self.reqs[&key];
        if req.ping && req.attempts > self.cfg.max_retries {
            return self.ping_failed(key, now);
        }
        if !req.ping && req.attempts > self.cfg.max_retries {
            let attempts = req.attempts;
            self.finish_part(key, now, Err(OpError::Timeout(attempts)));
            return;
        }
        if !req.ping {
            self.stats.retries += 1;
            if let Some(op) = self.ops.get_mut(&req.ticket) {
                op.retries += 1;
            }
        }
        self.transmit(key, now);
    }

    /// The handshake went unanswered: fail whatever waits on that node and
    /// start over with the next request for it.
    fn ping_failed(&mut self, key: u64, now: SimTime) {
        let req = self.drop_req(key);
        let node = req.dest.unwrap();
        let attempts = req.attempts;
        if let Some(s) = self.sessions.get_mut(&node) {
            s.ping = PingState::Idle;
        }
        let doomed: Vec<u64> = self
            .pending
            .iter()
            .copied()
            .filter(|k| {
                let r = &self.reqs[k];
                r.fixed
                    .or_else(|| self.routes.get(&(r.pid, region_of(r.va))).copied())
                    == Some(node)
            })
            .collect();
        for k in doomed {
            self.finish_part(k, now, Err(OpError::Timeout(attempts)));
        }
    }

    /// Undoes the window and hazard accounting of an admitted request.
    fn release_admission(&mut self, key: u64) {
        let req = &self.reqs[&key];
        let Some(dest) = req.dest else {
            return;
        };
        self.hazards.remove(&req.footprint);
        if let Some(s) = self.sessions.get_mut(&dest) {
            s.inflight -= 1;
        }
        if let Some(p) = self.procs.get_mut(&req.pid) {
            p.inflight -= 1;
            p.inflight_bytes -= req.expect_bytes;
        }
        if let Some(region) = req.region() {
            if let Some(n) = self.region_inflight.get_mut(&region) {
                *n -= 1;
                if *n == 0 {
                    self.region_inflight.remove(&region);
                    if self.held.get(&region) == Some(&false) {
                        self.held.insert(region, true);
                        self.send_hold_ack(region);
                    }
                }
            }
        }
    }

    fn drop_req(&mut self, key: u64) -> Req {
        let req = self.reqs.remove(&key).unwrap();
        for id in req.sent.keys() {
            self.attempt_of.remove(id);
        }
        req
    }

    fn finish_part(&mut self, key: u64, now: SimTime, result: OpResult) {
        self.release_admission(key);
        self.pending.retain(|&k| k != key);
        let req = self.drop_req(key);
        if let Some(n) = self.outstanding.get_mut(&(req.pid, req.thread)) {
            *n -= 1;
            if *n == 0 {
                self.outstanding.remove(&(req.pid, req.thread));
            }
        }
        let Some(op) = self.ops.get_mut(&req.ticket) else {
            return;
        };
        op.parts[req.part] = Some(result);
        op.remaining -= 1;
        if op.remaining == 0 {
            let parts = std::mem::take(&mut op.parts);
            let mut data = Vec::new();
            let mut out = Ok(());
            for p in parts.into_iter().flatten() {
                match p {
                    Ok(d) => data.extend(d),
                    Err(e) => {
                        if out.is_ok() {
                            out = Err(e);
                        }
                    }
                }
            }
            self.finish_op(req.ticket, now, out.map(|_| data));
        }
        self.pump(now);
    }

    fn finish_op(&mut self, ticket: Ticket, now: SimTime, result: OpResult) {
        let op = self.ops.get_mut(&ticket).unwrap();
        if result.is_ok() {
            self.stats.completed += 1;
        } else {
            self.stats.failed += 1;
        }
        op.state = HandleState::Done(result.clone());
        self.done.push(Completion {
            ticket,
            pid: op.pid,
            thread: op.thread,
            submitted: op.submitted,
            finished: now,
            retries: op.retries,
            result,
        });
    }

    fn on_control(&mut self, now: SimTime, h: &Header, payload: &[u8]) {
        let mut r = codec::Reader::new(payload);
        let (Some(pid), Some(region)) = (r.u32(), r.u64()) else {
            return;
        };
        let key = (pid, region);
        match h.op() {
            Opcode::Hold => {
                let drained = !self.region_inflight.contains_key(&key);
                self.held.insert(key, drained);
                if drained {
                    self.send_hold_ack(key);
                }
            }
            Opcode::Resume => {
                if let Some(owner) = r.u16() {
                    self.routes.insert(key, NodeId(owner));
                }
                self.held.remove(&key);
                self.pump(now);
            }
            _ => {}
        }
    }

    fn send_hold_ack(&mut self, (pid, region): (Pid, u64)) {
        let h = Header::request(Opcode::HoldAck, pid, 0, region * REGION_SIZE, 0);
        let mut p = Vec::new();
        codec::put_u32(&mut p, pid);
        codec::put_u64(&mut p, region);
        self.out.push(Emit::Send {
            dst: self.controller,
            depart: 0,
            bytes: Message::request(h, p).encode(),
        });
    }

    fn on_assigned(&mut self, now: SimTime, m: &Message) {
        let mut r = codec::Reader::new(&m.payload);
        let (Some(pid), Some(region)) = (r.u32(), r.u64()) else {
            return;
        };
        let key = (pid, region);
        self.assigning.remove(&key);
        match (m.status, r.u16()) {
            (Some(Status::Ok), Some(owner)) => {
                self.routes.insert(key, NodeId(owner));
            }
            (status, _) => {
                let err = OpError::Status(status.unwrap_or(Status::OutOfMemory));
                let doomed: Vec<u64> = self
                    .pending
                    .iter()
                    .copied()
                    .filter(|k| self.reqs[k].region() == Some(key))
                    .collect();
                for k in doomed {
                    self.finish_part(k, now, Err(err.clone()));
                }
            }
        }
        self.pump(now);
    }
}

fn new_session(cfg: &ClibConfig) -> Session {
    Session {
        aimd: Aimd::new(cfg.aimd()),
        rtt: RttEstimator::new(cfg.rtt_alpha),
        base_rtt: None,
        target: f64::INFINITY,
        inflight: 0,
        last_send: None,
        ping: PingState::Idle,
    }
}

fn srtt(s: &Session) -> f64 {
    s.rtt.srtt().unwrap_or(0.0)
}

/// Splits `[va, va + len)` at region boundaries.
pub fn split(va: Va, len: u64) -> Vec<(Va, u64)> {
    let mut out = Vec::new();
    let (mut va, end) = (va, va + len);
    while va < end {
        let stop = ((region_of(va) + 1) * REGION_SIZE).min(end);
        out.push((va, stop - va));
        va = stop;
    }
    out
}
