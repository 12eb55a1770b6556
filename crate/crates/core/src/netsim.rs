//! Deterministic discrete-event network.
//!
//! Packets carry encoded wire bytes. The simulator only peeks at headers for
//! tracing and scripted fault rules. Loss, duplication, corruption and jitter
//! are drawn from a seeded ChaCha stream and apply to compute-node ↔
//! memory-node traffic; controller and node-to-node control traffic is
//! delivered reliably.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{NodeId, SimTime};
use crate::wire::{Header, RESPONSE_BIT};

/// Role of an endpoint, which decides whether faults apply to its links.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointKind {
    Client,
    Memory,
    Controller,
}

/// A scripted rule applied on top of the random fault model.
#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    /// Drop every request with `retry_of == 0` (the first transmission).
    DropOriginalRequests,
    /// Drop every response to a request with `retry_of == 0`.
    DropOriginalResponses,
    /// Add `extra` ns of one-way delay to packets sent at or after `after`.
    ExtraDelay { after: SimTime, extra: SimTime },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultPlan {
    pub seed: u64,
    pub loss: f64,
    pub dup: f64,
    pub corrupt: f64,
    /// Uniform extra delay in `[0, jitter]` ns per packet.
    pub jitter: SimTime,
    pub base_delay: SimTime,
    /// Link rate in bits per second; 0 disables serialization delay.
    pub bandwidth_bps: u64,
    pub rules: Vec<Rule>,
}

impl Default for FaultPlan {
    fn default() -> Self {
        FaultPlan {
            seed: 0,
            loss: 0.0,
            dup: 0.0,
            corrupt: 0.0,
            jitter: 0,
            base_delay: 1000,
            bandwidth_bps: 10_000_000_000,
            rules: Vec::new(),
        }
    }
}

impl FaultPlan {
    pub fn serialization(&self, bytes: usize) -> SimTime {
        if self.bandwidth_bps == 0 {
            return 0;
        }
        (bytes as u64 * 8 * 1_000_000_000).div_ceil(self.bandwidth_bps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub src: NodeId,
    pub dst: NodeId,
    pub bytes: Vec<u8>,
    pub corrupted: bool,
    pub sent_at: SimTime,
    pub deliver_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Deliver(Packet),
    Timer(u64),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("endpoint {0} is not registered")]
    UnknownEndpoint(NodeId),
    #[error("endpoint {0} registered twice")]
    DuplicateEndpoint(NodeId),
}

/// Something that consumes events for the endpoints it owns.
pub trait Handler {
    fn handle(&mut self, now: SimTime, dst: NodeId, event: Event, net: &mut Network);
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub corrupted: u64,
    pub timers: u64,
}

struct Queued {
    at: SimTime,
    seq: u64,
    dst: NodeId,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Min-heap on (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

pub struct Network {
    plan: FaultPlan,
    rng: ChaCha8Rng,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Queued>,
    endpoints: HashMap<NodeId, EndpointKind>,
    stats: NetStats,
    trace: Option<String>,
}

impl Network {
    pub fn new(plan: FaultPlan) -> Self {
        Network {
            rng: ChaCha8Rng::seed_from_u64(plan.seed),
            plan,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            endpoints: HashMap::new(),
            stats: NetStats::default(),
            trace: None,
        }
    }

    pub fn register(&mut self, id: NodeId, kind: EndpointKind) -> Result<(), NetError> {
        if self.endpoints.insert(id, kind).is_some() {
            return Err(NetError::DuplicateEndpoint(id));
        }
        Ok(())
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    pub fn plan_mut(&mut self) -> &mut FaultPlan {
        &mut self.plan
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Starts recording `time,event,src,dst,request_id,frag_seq,flags` lines.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(String::new);
    }

    pub fn trace(&self) -> &str {
        self.trace.as_deref().unwrap_or("")
    }

    pub fn take_trace(&mut self) -> String {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn send(&mut self, src: NodeId, dst: NodeId, bytes: Vec<u8>) -> Result<(), NetError> {
        self.send_at(src, dst, bytes, self.now)
    }

    /// Sends a packet that leaves `src` at `depart` (not earlier than now).
    pub fn send_at(
        &mut self,
        src: NodeId,
        dst: NodeId,
        bytes: Vec<u8>,
        depart: SimTime,
    ) -> Result<(), NetError> {
        let src_kind = *self
            .endpoints
            .get(&src)
            .ok_or(NetError::UnknownEndpoint(src))?;
        let dst_kind = *self
            .endpoints
            .get(&dst)
            .ok_or(NetError::UnknownEndpoint(dst))?;
        let depart = depart.max(self.now);
        self.stats.sent += 1;
        let header = Header::parse(&bytes).ok();
        self.record(depart, "send", src, dst, header.as_ref(), "");

        let faulty = matches!(
            (src_kind, dst_kind),
            (EndpointKind::Client, EndpointKind::Memory)
                | (EndpointKind::Memory, EndpointKind::Client)
        );
        if faulty && self.scripted_drop(header.as_ref()) {
            self.stats.dropped += 1;
            self.record(depart, "drop", src, dst, header.as_ref(), "S");
            return Ok(());
        }
        let mut extra = 0;
        for rule in &self.plan.rules {
            if let Rule::ExtraDelay { after, extra: e } = *rule {
                if faulty && depart >= after {
                    extra += e;
                }
            }
        }

        // Every random draw happens for every faulty packet so the stream
        // position depends only on the packet sequence.
        let (lost, dup, corrupt) = if faulty {
            (
                self.rng.random_bool(self.plan.loss),
                self.rng.random_bool(self.plan.dup),
                self.rng.random_bool(self.plan.corrupt),
            )
        } else {
            (false, false, false)
        };
        if lost {
            self.stats.dropped += 1;
            self.record(depart, "drop", src, dst, header.as_ref(), "L");
            return Ok(());
        }
        let fixed = self.plan.base_delay + self.plan.serialization(bytes.len()) + extra;
        let copies = if dup { 2 } else { 1 };
        for copy in 0..copies {
            let jitter = if faulty && self.plan.jitter > 0 {
                self.rng.random_range(0..=self.plan.jitter)
            } else {
                0
            };
            let corrupted = corrupt && copy == 0;
            if corrupted {
                self.stats.corrupted += 1;
            }
            if copy == 1 {
                self.stats.duplicated += 1;
                self.record(depart, "dup", src, dst, header.as_ref(), "D");
            }
            let deliver_at = depart + fixed + jitter;
            let packet = Packet {
                src,
                dst,
                bytes: bytes.clone(),
                corrupted,
                sent_at: depart,
                deliver_at,
            };
            self.push(deliver_at, dst, Event::Deliver(packet));
        }
        Ok(())
    }

    fn scripted_drop(&self, header: Option<&Header>) -> bool {
        let Some(h) = header else { return false };
        let is_response = h.opcode & RESPONSE_BIT != 0;
        self.plan.rules.iter().any(|r| match r {
            Rule::DropOriginalRequests => !is_response && h.is_original(),
            Rule::DropOriginalResponses => is_response && h.is_original(),
            Rule::ExtraDelay { .. } => false,
        })
    }

    /// Wakes `endpoint` at `at` with `token`.
    pub fn schedule(&mut self, endpoint: NodeId, at: SimTime, token: u64) {
        self.stats.timers += 1;
        self.push(at.max(self.now), endpoint, Event::Timer(token));
    }

    fn push(&mut self, at: SimTime, dst: NodeId, event: Event) {
        self.seq += 1;
        self.queue.push(Queued {
            at,
            seq: self.seq,
            dst,
            event,
        });
    }

    fn record(
        &mut self,
        at: SimTime,
        event: &str,
        src: NodeId,
        dst: NodeId,
        header: Option<&Header>,
        flags: &str,
    ) {
        if let Some(trace) = self.trace.as_mut() {
            let (id, frag) = header.map_or((0, 0), |h| (h.request_id, h.frag_seq));
            let retry = if header.is_some_and(|h| !h.is_original()) {
                "R"
            } else {
                ""
            };
            let _ = writeln!(trace, "{at},{event},{src},{dst},{id},{frag},{flags}{retry}");
        }
    }

    /// Pops and dispatches one event. Returns false when the queue is empty.
    pub fn step<H: Handler + ?Sized>(&mut self, handler: &mut H) -> bool {
        let Some(q) = self.queue.pop() else {
            return false;
        };
        debug_assert!(q.at >= self.now);
        self.now = q.at;
        if let Event::Deliver(p) = &q.event {
            self.stats.delivered += 1;
            let header = Header::parse(&p.bytes).ok();
            let flags = if p.corrupted { "C" } else { "" };
            let (src, dst) = (p.src, p.dst);
            self.record(q.at, "deliver", src, dst, header.as_ref(), flags);
        }
        handler.handle(q.at, q.dst, q.event, self);
        true
    }

    /// Runs until the queue drains or the next event lies beyond `deadline`.
    pub fn run_until<H: Handler + ?Sized>(
        &mut self,
        handler: &mut H,
        deadline: SimTime,
    ) -> SimTime {
        while self.queue.peek().is_some_and(|q| q.at <= deadline) {
            self.step(handler);
        }
        if deadline != SimTime::MAX {
            self.now = self.now.max(deadline);
        }
        self.now
    }

    /// Runs until `done` holds (checked before each event) or the queue drains.
    pub fn run_while<H: Handler + ?Sized>(
        &mut self,
        handler: &mut H,
        mut done: impl FnMut(&H) -> bool,
    ) -> SimTime {
        while !done(handler) && self.step(handler) {}
        self.now
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|q| q.at)
    }
}
