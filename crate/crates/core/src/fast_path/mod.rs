//! Memory node: match-and-action routing, translation with inline fault
//! handling, data and atomic execution, locks and fences, retry dedup, and
//! the control messages used by region migration.
//!
//! The node is a pure state machine. [`MemoryNode::on_packet`] and
//! [`MemoryNode::on_timer`] consume one event and return the packets and
//! timers it produces, each stamped with its departure time.

pub mod dedup;
pub mod memory;

use std::collections::{HashMap, VecDeque};

use crate::metadata::{MetaError, MetadataPlane, Vma};
use crate::page_table::{HashPageTable, TableGeometry, Tlb};
use crate::types::{
    region_of, Access, NodeId, PageSize, Perms, Pid, SimTime, Va, Vpn, REGION_SIZE,
};
use crate::wire::{codec, fragment, fragment_count, Header, Message, Opcode, Status, HEADER_LEN};

pub use dedup::{DedupBuffer, DedupRecord};
pub use memory::PhysMemory;

/// Timer token for the background free-page refill.
pub const REFILL_TIMER: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MnConfig {
    pub page_size: PageSize,
    pub physical_bytes: u64,
    pub slots_per_bucket: usize,
    pub overprovision: u64,
    pub tlb_entries: usize,
    pub free_buffer_pages: usize,
    /// Cost of one pipeline stage (`pipeline_step_cost`).
    pub step_ns: SimTime,
    /// Stages every request passes through.
    pub stages: u64,
    /// Page-table bucket fetch on a TLB miss.
    pub dram_ns: SimTime,
    /// Payload bytes moved per ns.
    pub bytes_per_ns: u64,
    /// Service time of an allocation or free on the slow path.
    pub meta_ns: SimTime,
    /// Delay before the background refill runs, and the stall charged when
    /// a fault finds the free-page buffer empty.
    pub refill_ns: SimTime,
    pub dedup_bytes: usize,
    pub mtu: usize,
    pub max_request_bytes: usize,
    pub max_locks: usize,
    pub max_lock_waiters: usize,
    pub max_partial_writes: usize,
    pub log_service: bool,
}

impl Default for MnConfig {
    fn default() -> Self {
        MnConfig {
            page_size: PageSize::Size4M,
            physical_bytes: 1 << 30,
            slots_per_bucket: crate::page_table::DEFAULT_SLOTS_PER_BUCKET,
            overprovision: crate::page_table::DEFAULT_OVERPROVISION,
            tlb_entries: 256,
            free_buffer_pages: crate::metadata::DEFAULT_FREE_BUFFER_PAGES,
            step_ns: 4,
            stages: 4,
            dram_ns: 60,
            bytes_per_ns: 16,
            meta_ns: 2000,
            refill_ns: 1000,
            dedup_bytes: dedup::DEFAULT_CAPACITY_BYTES,
            mtu: crate::wire::DEFAULT_MTU,
            max_request_bytes: 1 << 20,
            max_locks: 1024,
            max_lock_waiters: 256,
            max_partial_writes: 256,
            log_service: false,
        }
    }
}

impl MnConfig {
    pub fn geometry(&self) -> TableGeometry {
        TableGeometry::for_memory(
            self.physical_bytes,
            self.page_size.bytes(),
            self.slots_per_bucket,
            self.overprovision,
        )
    }

    pub fn physical_pages(&self) -> u64 {
        self.physical_bytes / self.page_size.bytes()
    }
}

/// Output of one event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emit {
    Send {
        dst: NodeId,
        depart: SimTime,
        bytes: Vec<u8>,
    },
    Timer {
        at: SimTime,
        token: u64,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MnStats {
    pub requests: u64,
    pub packets: u64,
    pub nacks: u64,
    pub malformed: u64,
    pub bad_ops: u64,
    pub perm_errors: u64,
    pub faults: u64,
    pub fault_stalls: u64,
    pub dedup_hits: u64,
    pub translations: u64,
    pub tlb_miss_translations: u64,
    pub allocs: u64,
    pub alloc_retries: u64,
    pub max_alloc_retries: u32,
    pub frees: u64,
    pub refills: u64,
    pub migrated_out_pages: u64,
    pub migrated_in_pages: u64,
}

/// Service timing of one request, kept when `log_service` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceRecord {
    pub request_id: u64,
    pub opcode: u8,
    pub arrival: SimTime,
    pub start: SimTime,
    pub done: SimTime,
    pub tlb_misses: u32,
    pub faults: u32,
}

impl ServiceRecord {
    pub fn service_time(&self) -> SimTime {
        self.done - self.start
    }
}

/// Work charged to the request currently in the pipeline.
#[derive(Debug, Clone, Copy, Default)]
struct Cost {
    tlb_misses: u32,
    faults: u32,
    stalls: u32,
    bytes: u64,
}

/// Translation, memory and metadata state shared by the data path and
/// extension handlers.
pub struct MnCore {
    page_shift: u32,
    table: HashPageTable,
    tlb: Tlb,
    meta: MetadataPlane,
    memory: PhysMemory,
    physical_pages: u64,
    region_access: HashMap<(Pid, u64), SimTime>,
    region_pages: HashMap<(Pid, u64), u64>,
    cost: Cost,
    now: SimTime,
    stats: MnStats,
}

impl MnCore {
    pub fn page_bytes(&self) -> u64 {
        1 << self.page_shift
    }

    pub fn table(&self) -> &HashPageTable {
        &self.table
    }

    pub fn tlb(&self) -> &Tlb {
        &self.tlb
    }

    pub fn meta(&self) -> &MetadataPlane {
        &self.meta
    }

    pub fn memory(&self) -> &PhysMemory {
        &self.memory
    }

    fn region_key(&self, pid: Pid, vpn: Vpn) -> (Pid, u64) {
        (pid, region_of(vpn << self.page_shift))
    }

    /// Translates one address. A TLB miss costs exactly one bucket fetch; a
    /// present-invalid entry is backed from the free-page buffer inline.
    pub fn translate(&mut self, pid: Pid, va: Va, access: Access) -> Result<u64, Status> {
        let vpn = va >> self.page_shift;
        let offset = va & (self.page_bytes() - 1);
        self.stats.translations += 1;
        if let Some(hit) = self.tlb.access(pid, vpn) {
            if !hit.perms.allows(access) {
                self.stats.perm_errors += 1;
                return Err(Status::Perm);
            }
            self.region_access
                .insert(self.region_key(pid, vpn), self.now);
            return Ok((hit.ppn << self.page_shift) + offset);
        }
        self.stats.tlb_miss_translations += 1;
        self.cost.tlb_misses += 1;
        let Some(mut pte) = self.table.lookup(pid, vpn) else {
            self.stats.perm_errors += 1;
            return Err(Status::Perm);
        };
        if !pte.perms.allows(access) {
            self.stats.perm_errors += 1;
            return Err(Status::Perm);
        }
        if !pte.valid {
            let ppn = match self.meta.pop_free_page() {
                Some(p) => p,
                None => {
                    // Buffer ran dry: the request waits for a synchronous refill.
                    self.stats.fault_stalls += 1;
                    self.cost.stalls += 1;
                    self.meta.refill_free_pages();
                    self.stats.refills += 1;
                    self.meta.pop_free_page().ok_or(Status::OutOfMemory)?
                }
            };
            self.memory.zero(ppn << self.page_shift, self.page_bytes());
            pte.ppn = ppn;
            pte.valid = true;
            self.table.update(pte).expect("entry was just looked up");
            *self
                .region_pages
                .entry(self.region_key(pid, vpn))
                .or_default() += 1;
            self.stats.faults += 1;
            self.cost.faults += 1;
        }
        self.tlb.fill(pid, vpn, pte.ppn, pte.perms);
        self.region_access
            .insert(self.region_key(pid, vpn), self.now);
        Ok((pte.ppn << self.page_shift) + offset)
    }

    /// Translates every page of `[va, va + len)`, returning physical chunks.
    fn translate_range(
        &mut self,
        pid: Pid,
        va: Va,
        len: u64,
        access: Access,
    ) -> Result<Vec<(u64, usize)>, Status> {
        let mut chunks = Vec::new();
        let mut done = 0u64;
        while done < len {
            let addr = va.checked_add(done).ok_or(Status::Perm)?;
            let in_page = self.page_bytes() - (addr & (self.page_bytes() - 1));
            let n = in_page.min(len - done);
            chunks.push((self.translate(pid, addr, access)?, n as usize));
            done += n;
        }
        Ok(chunks)
    }

    pub fn read(&mut self, pid: Pid, va: Va, len: u64) -> Result<Vec<u8>, Status> {
        let chunks = self.translate_range(pid, va, len, Access::Read)?;
        let mut out = Vec::with_capacity(len as usize);
        for (pa, n) in chunks {
            out.extend_from_slice(&self.memory.read(pa, n));
        }
        self.cost.bytes += len;
        Ok(out)
    }

    pub fn write(&mut self, pid: Pid, va: Va, data: &[u8]) -> Result<(), Status> {
        let chunks = self.translate_range(pid, va, data.len() as u64, Access::Write)?;
        let mut off = 0;
        for (pa, n) in chunks {
            self.memory.write(pa, &data[off..off + n]);
            off += n;
        }
        self.cost.bytes += data.len() as u64;
        Ok(())
    }

    /// Allocates VA for `pid` anywhere in its address space; used by
    /// extension services for their private arenas.
    pub fn alloc(&mut self, pid: Pid, size: u64, perms: Perms) -> Result<Va, Status> {
        let limit = u64::MAX >> self.page_shift;
        let out = self
            .meta
            .alloc_va(&mut self.table, pid, size, perms, 1..limit)
            .map_err(meta_status)?;
        Ok(out.va)
    }

    /// Reads through the page table without touching the TLB, the fetch
    /// counter or fault handling. Unbacked pages read as zero; `None` if any
    /// page is unmapped.
    pub fn peek(&self, pid: Pid, va: Va, len: usize) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(len);
        let mut done = 0u64;
        while done < len as u64 {
            let addr = va + done;
            let in_page = self.page_bytes() - (addr & (self.page_bytes() - 1));
            let n = in_page.min(len as u64 - done);
            let pte = self.table.peek(pid, addr >> self.page_shift)?;
            if pte.valid {
                let pa = (pte.ppn << self.page_shift) + (addr & (self.page_bytes() - 1));
                out.extend_from_slice(&self.memory.read(pa, n as usize));
            } else {
                out.resize(out.len() + n as usize, 0);
            }
            done += n;
        }
        Some(out)
    }

    /// Fraction of physical pages backing valid mappings.
    pub fn occupancy(&self) -> f64 {
        self.used_pages() as f64 / self.physical_pages as f64
    }

    pub fn used_pages(&self) -> u64 {
        self.region_pages.values().sum()
    }
}

fn meta_status(e: MetaError) -> Status {
    match e {
        MetaError::InvalidArgument => Status::InvalidArgument,
        MetaError::OutOfVa => Status::OutOfVa,
        MetaError::NotAllocated => Status::NotAllocated,
        MetaError::Overflow => Status::Full,
        MetaError::OutOfMemory => Status::OutOfMemory,
    }
}

/// Context handed to extension handlers.
pub struct ExtCtx<'a> {
    core: &'a mut MnCore,
    pub now: SimTime,
    pub node: NodeId,
}

impl ExtCtx<'_> {
    pub fn read(&mut self, pid: Pid, va: Va, len: u64) -> Result<Vec<u8>, Status> {
        self.core.read(pid, va, len)
    }

    pub fn write(&mut self, pid: Pid, va: Va, data: &[u8]) -> Result<(), Status> {
        self.core.write(pid, va, data)
    }

    pub fn read_u64(&mut self, pid: Pid, va: Va) -> Result<u64, Status> {
        let b = self.core.read(pid, va, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn write_u64(&mut self, pid: Pid, va: Va, v: u64) -> Result<(), Status> {
        self.core.write(pid, va, &v.to_le_bytes())
    }

    pub fn alloc(&mut self, pid: Pid, size: u64) -> Result<Va, Status> {
        self.core.alloc(pid, size, Perms::RW)
    }

    pub fn page_bytes(&self) -> u64 {
        self.core.page_bytes()
    }
}

/// A service running on the memory node's extend path.
pub trait Extension {
    /// Extension codes (`n` in `Ext(n)`) this handler serves.
    fn codes(&self) -> Vec<u8>;
    /// Whether `code` changes state, so its retries must be deduplicated.
    fn mutates(&self, code: u8) -> bool;
    fn handle(
        &mut self,
        code: u8,
        req: &Header,
        payload: &[u8],
        ctx: &mut ExtCtx<'_>,
    ) -> (Status, Vec<u8>);
    /// Named counters for reports.
    fn stats(&self) -> Vec<(&'static str, u64)> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
struct Waiter {
    src: NodeId,
    header: Header,
}

#[derive(Debug, Clone)]
struct LockState {
    holder: u64,
    waiters: VecDeque<Waiter>,
}

#[derive(Debug, Clone)]
struct PartialWrite {
    received: Vec<bool>,
    remaining: u16,
    status: Status,
    done: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Pipeline {
    free_at: SimTime,
    barrier: SimTime,
    last_completion: SimTime,
    slow_free_at: SimTime,
}

pub struct MemoryNode {
    id: NodeId,
    controller: NodeId,
    cfg: MnConfig,
    core: MnCore,
    dedup: DedupBuffer,
    locks: HashMap<(Pid, Va), LockState>,
    partial: HashMap<u64, PartialWrite>,
    partial_order: VecDeque<u64>,
    extensions: Vec<Box<dyn Extension>>,
    ext_routes: HashMap<u8, usize>,
    pipe: Pipeline,
    refill_pending: bool,
    service_log: Vec<ServiceRecord>,
}

impl MemoryNode {
    pub fn new(id: NodeId, controller: NodeId, cfg: MnConfig) -> Self {
        let table = HashPageTable::new(cfg.geometry());
        let mut meta = MetadataPlane::new(
            cfg.page_size.shift(),
            cfg.physical_pages(),
            &table,
            cfg.free_buffer_pages,
        );
        meta.refill_free_pages();
        let core = MnCore {
            page_shift: cfg.page_size.shift(),
            table,
            tlb: Tlb::new(cfg.tlb_entries),
            meta,
            memory: PhysMemory::new(),
            physical_pages: cfg.physical_pages(),
            region_access: HashMap::new(),
            region_pages: HashMap::new(),
            cost: Cost::default(),
            now: 0,
            stats: MnStats::default(),
        };
        MemoryNode {
            id,
            controller,
            dedup: DedupBuffer::new(cfg.dedup_bytes),
            cfg,
            core,
            locks: HashMap::new(),
            partial: HashMap::new(),
            partial_order: VecDeque::new(),
            extensions: Vec::new(),
            ext_routes: HashMap::new(),
            pipe: Pipeline::default(),
            refill_pending: false,
            service_log: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &MnConfig {
        &self.cfg
    }

    pub fn core(&self) -> &MnCore {
        &self.core
    }

    pub fn stats(&self) -> MnStats {
        self.core.stats
    }

    pub fn dedup(&self) -> &DedupBuffer {
        &self.dedup
    }

    pub fn service_log(&self) -> &[ServiceRecord] {
        &self.service_log
    }

    pub fn clear_service_log(&mut self) {
        self.service_log.clear();
    }

    /// Drops every cached translation (test instrumentation).
    pub fn flush_tlb(&mut self) {
        self.core.tlb.flush();
    }

    pub fn register_extension(&mut self, ext: Box<dyn Extension>) {
        let idx = self.extensions.len();
        for code in ext.codes() {
            self.ext_routes.insert(code, idx);
        }
        self.extensions.push(ext);
    }

    pub fn peek(&self, pid: Pid, va: Va, len: usize) -> Option<Vec<u8>> {
        self.core.peek(pid, va, len)
    }

    /// Counters reported by the registered extensions.
    pub fn extension_stats(&self) -> Vec<(&'static str, u64)> {
        self.extensions.iter().flat_map(|e| e.stats()).collect()
    }

    /// Fixed-width encoding of all state kept across requests other than
    /// physical memory, the page tables and per-process VA metadata.
    pub fn control_state(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in self.dedup.records() {
            codec::put_u64(&mut out, r.id);
            codec::put_u64(&mut out, r.alias);
            out.push(r.status.code());
            out.push(r.value.len() as u8);
            let mut v = r.value.clone();
            v.resize(dedup::MAX_VALUE_BYTES, 0);
            out.extend_from_slice(&v);
        }
        let mut locks: Vec<_> = self.locks.iter().collect();
        locks.sort_by_key(|(k, _)| **k);
        for ((pid, va), l) in locks {
            codec::put_u32(&mut out, *pid);
            codec::put_u64(&mut out, *va);
            codec::put_u64(&mut out, l.holder);
            for w in &l.waiters {
                codec::put_u16(&mut out, w.src.0);
                out.extend_from_slice(&Message::request(w.header, vec![]).encode());
            }
        }
        for id in &self.partial_order {
            let p = &self.partial[id];
            codec::put_u64(&mut out, *id);
            out.extend(p.received.iter().map(|&b| b as u8));
        }
        for ppn in self.core.meta.free_buffer().pages() {
            codec::put_u64(&mut out, ppn);
        }
        for t in [
            self.pipe.free_at,
            self.pipe.barrier,
            self.pipe.last_completion,
            self.pipe.slow_free_at,
        ] {
            codec::put_u64(&mut out, t);
        }
        out.push(self.refill_pending as u8);
        out
    }

    /// Handles one delivered packet.
    pub fn on_packet(
        &mut self,
        now: SimTime,
        src: NodeId,
        bytes: &[u8],
        corrupted: bool,
    ) -> Vec<Emit> {
        let mut out = Vec::new();
        self.core.now = now;
        self.core.stats.packets += 1;
        let Ok(h) = Header::parse(bytes) else {
            self.core.stats.malformed += 1;
            return out;
        };
        if corrupted {
            self.core.stats.nacks += 1;
            let at = self.start(now) + self.cfg.step_ns;
            self.respond(&mut out, src, &h, Status::Nack, Vec::new(), at);
            return out;
        }
        let payload = &bytes[HEADER_LEN..];
        let op = h.op();
        if h.opcode & crate::wire::RESPONSE_BIT != 0 {
            self.bad_op(&mut out, src, &h, now);
            return out;
        }
        match op {
            Opcode::Migrate | Opcode::MigrateData | Opcode::DropRegion => {
                self.control(&mut out, now, src, &h, payload);
                return out;
            }
            Opcode::Ping => {
                self.core.stats.requests += 1;
                let done = self.start(now) + self.cfg.step_ns;
                self.respond(&mut out, src, &h, Status::Ok, Vec::new(), done);
                return out;
            }
            _ => {}
        }

        let mutating = match op {
            Opcode::Ext(n) => self
                .ext_routes
                .get(&n)
                .is_some_and(|&i| self.extensions[i].mutates(n)),
            _ => op.is_non_idempotent(),
        };
        if mutating {
            if let Some(rec) = self.dedup.lookup(&[h.request_id, h.retry_of]).cloned() {
                self.core.stats.dedup_hits += 1;
                if h.frag_count > 1 {
                    self.mark_partial_done(h.request_id, h.frag_count);
                }
                let done = self.start(now) + self.cfg.step_ns;
                self.respond(&mut out, src, &h, rec.status, rec.value, done);
                return out;
            }
        }
        if h.frag_seq == 0 || op != Opcode::Write {
            self.core.stats.requests += 1;
        }

        self.core.cost = Cost::default();
        match op {
            Opcode::Read => self.exec_read(&mut out, now, src, &h),
            Opcode::Write => self.exec_write(&mut out, now, src, &h, payload),
            Opcode::FetchAdd | Opcode::CompareSwap | Opcode::TestSet => {
                self.exec_atomic(&mut out, now, src, &h, payload)
            }
            Opcode::Lock => self.exec_lock(&mut out, now, src, &h),
            Opcode::Unlock => self.exec_unlock(&mut out, now, src, &h),
            Opcode::Fence => {
                let done = self.pipe.last_completion.max(self.start(now)) + self.cfg.step_ns;
                self.pipe.barrier = done;
                self.pipe.last_completion = done;
                self.log(&h, now, done - self.cfg.step_ns, done);
                self.respond(&mut out, src, &h, Status::Ok, Vec::new(), done);
            }
            Opcode::Alloc | Opcode::Free => self.exec_meta(&mut out, now, src, &h, payload),
            Opcode::Ext(n) if self.ext_routes.contains_key(&n) => {
                self.exec_ext(&mut out, now, src, &h, n, payload, mutating)
            }
            _ => self.bad_op(&mut out, src, &h, now),
        }
        self.schedule_refill(&mut out, now);
        out
    }

    pub fn on_timer(&mut self, now: SimTime, token: u64) -> Vec<Emit> {
        let mut out = Vec::new();
        self.core.now = now;
        if token == REFILL_TIMER {
            self.refill_pending = false;
            if self.core.meta.refill_free_pages() > 0 {
                self.core.stats.refills += 1;
            }
            self.report(&mut out, now);
        }
        out
    }

    /// Occupancy report for the controller: used and total pages, then per
    /// region `(pid, region, last_access, pages)`.
    pub fn occupancy_report(&self) -> Vec<u8> {
        let mut p = Vec::new();
        codec::put_u64(&mut p, self.core.used_pages());
        codec::put_u64(&mut p, self.core.physical_pages);
        let mut regions: Vec<_> = self.core.region_pages.iter().collect();
        regions.sort_by_key(|(k, _)| **k);
        codec::put_u32(&mut p, regions.len() as u32);
        for (&(pid, region), &pages) in regions {
            codec::put_u32(&mut p, pid);
            codec::put_u64(&mut p, region);
            let last = self
                .core
                .region_access
                .get(&(pid, region))
                .copied()
                .unwrap_or(0);
            codec::put_u64(&mut p, last);
            codec::put_u64(&mut p, pages);
        }
        p
    }

    fn report(&mut self, out: &mut Vec<Emit>, now: SimTime) {
        let h = Header::request(Opcode::OccupancyReport, 0, 0, 0, 0);
        out.push(Emit::Send {
            dst: self.controller,
            depart: now,
            bytes: Message::request(h, self.occupancy_report()).encode(),
        });
    }

    fn schedule_refill(&mut self, out: &mut Vec<Emit>, now: SimTime) {
        if !self.refill_pending
            && !self.core.meta.free_buffer().is_full()
            && self.core.meta.buddy().free_pages() > 0
        {
            self.refill_pending = true;
            out.push(Emit::Timer {
                at: now + self.cfg.refill_ns,
                token: REFILL_TIMER,
            });
        }
    }

    fn start(&mut self, now: SimTime) -> SimTime {
        let start = now.max(self.pipe.free_at).max(self.pipe.barrier);
        self.pipe.free_at = start + self.cfg.step_ns;
        start
    }

    /// Admits the request to the pipeline and returns (start, completion).
    fn finish(&mut self, now: SimTime) -> (SimTime, SimTime) {
        let start = self.start(now);
        let c = self.core.cost;
        let latency = self.cfg.stages * self.cfg.step_ns
            + c.tlb_misses as u64 * self.cfg.dram_ns
            + c.faults as u64 * 3 * self.cfg.step_ns
            + c.stalls as u64 * self.cfg.refill_ns
            + c.bytes.div_ceil(self.cfg.bytes_per_ns.max(1));
        let done = start + latency;
        self.pipe.last_completion = self.pipe.last_completion.max(done);
        (start, done)
    }

    fn log(&mut self, h: &Header, arrival: SimTime, start: SimTime, done: SimTime) {
        if self.cfg.log_service {
            self.service_log.push(ServiceRecord {
                request_id: h.request_id,
                opcode: h.opcode,
                arrival,
                start,
                done,
                tlb_misses: self.core.cost.tlb_misses,
                faults: self.core.cost.faults,
            });
        }
    }

    fn complete(
        &mut self,
        out: &mut Vec<Emit>,
        now: SimTime,
        src: NodeId,
        h: &Header,
        status: Status,
        payload: Vec<u8>,
    ) {
        let (start, done) = self.finish(now);
        self.log(h, now, start, done);
        self.respond(out, src, h, status, payload, done);
    }

    fn respond(
        &self,
        out: &mut Vec<Emit>,
        dst: NodeId,
        req: &Header,
        status: Status,
        payload: Vec<u8>,
        at: SimTime,
    ) {
        let frags = fragment(&payload, self.cfg.mtu);
        let count = frags.len() as u16;
        for (i, f) in frags.into_iter().enumerate() {
            let mut rh = req.reply();
            rh.total_len = payload.len() as u32;
            rh.frag_seq = i as u16;
            rh.frag_count = count;
            out.push(Emit::Send {
                dst,
                depart: at,
                bytes: Message::response(rh, status, f.to_vec()).encode(),
            });
        }
    }

    fn bad_op(&mut self, out: &mut Vec<Emit>, src: NodeId, h: &Header, now: SimTime) {
        self.core.stats.bad_ops += 1;
        let done = self.start(now) + self.cfg.step_ns;
        self.respond(out, src, h, Status::BadOp, Vec::new(), done);
    }

    fn remember(&mut self, h: &Header, status: Status, value: Vec<u8>) {
        self.dedup.record(DedupRecord {
            id: h.request_id,
            alias: h.retry_of,
            status,
            value,
        });
    }

    fn exec_read(&mut self, out: &mut Vec<Emit>, now: SimTime, src: NodeId, h: &Header) {
        if h.total_len as usize > self.cfg.max_request_bytes {
            return self.complete(out, now, src, h, Status::InvalidArgument, Vec::new());
        }
        match self.core.read(h.pid, h.va, h.total_len as u64) {
            Ok(data) => self.complete(out, now, src, h, Status::Ok, data),
            Err(s) => self.complete(out, now, src, h, s, Vec::new()),
        }
    }

    fn exec_write(
        &mut self,
        out: &mut Vec<Emit>,
        now: SimTime,
        src: NodeId,
        h: &Header,
        payload: &[u8],
    ) {
        let total = h.total_len as usize;
        let offset = h.frag_seq as usize * self.cfg.mtu;
        let valid = total <= self.cfg.max_request_bytes
            && h.frag_count == fragment_count(total, self.cfg.mtu)
            && h.frag_seq < h.frag_count
            && offset + payload.len() <= total
            && (h.frag_seq + 1 < h.frag_count || offset + payload.len() == total);
        if !valid {
            return self.complete(out, now, src, h, Status::InvalidArgument, Vec::new());
        }
        if h.frag_count == 1 {
            let status = match self.core.write(h.pid, h.va, payload) {
                Ok(()) => Status::Ok,
                Err(s) => s,
            };
            self.remember(h, status, Vec::new());
            return self.complete(out, now, src, h, status, Vec::new());
        }
        // Fragments are placed independently; the response follows the last.
        let entry = self.partial_entry(h.request_id, h.frag_count);
        if entry.done || entry.received[h.frag_seq as usize] {
            let (start, done) = self.finish(now);
            self.log(h, now, start, done);
            return;
        }
        let status = match self.core.write(h.pid, h.va + offset as u64, payload) {
            Ok(()) => Status::Ok,
            Err(s) => s,
        };
        let entry = self.partial_entry(h.request_id, h.frag_count);
        entry.received[h.frag_seq as usize] = true;
        entry.remaining -= 1;
        if status != Status::Ok {
            entry.status = status;
        }
        if entry.remaining == 0 {
            entry.done = true;
            let status = entry.status;
            self.remember(h, status, Vec::new());
            self.complete(out, now, src, h, status, Vec::new());
        } else {
            let (start, done) = self.finish(now);
            self.log(h, now, start, done);
        }
    }

    fn partial_entry(&mut self, id: u64, count: u16) -> &mut PartialWrite {
        if !self.partial.contains_key(&id) {
            while self.partial.len() >= self.cfg.max_partial_writes.max(1) {
                match self.partial_order.pop_front() {
                    Some(old) => {
                        self.partial.remove(&old);
                    }
                    None => break,
                }
            }
            self.partial_order.push_back(id);
            self.partial.insert(
                id,
                PartialWrite {
                    received: vec![false; count as usize],
                    remaining: count,
                    status: Status::Ok,
                    done: false,
                },
            );
        }
        self.partial.get_mut(&id).unwrap()
    }

    fn mark_partial_done(&mut self, id: u64, count: u16) {
        self.partial_entry(id, count).done = true;
    }

    fn exec_atomic(
        &mut self,
        out: &mut Vec<Emit>,
        now: SimTime,
        src: NodeId,
        h: &Header,
        payload: &[u8],
    ) {
        let mut r = codec::Reader::new(payload);
        let args = match h.op() {
            Opcode::FetchAdd => r.u64().map(|d| (d, 0)),
            Opcode::CompareSwap => r.u64().zip(r.u64()),
            _ => Some((0, 0)),
        };
        let Some((a, b)) = args else {
            return self.complete(out, now, src, h, Status::InvalidArgument, Vec::new());
        };
        let result = (|| {
            let cur = self.core.read(h.pid, h.va, 8)?;
            let old = u64::from_le_bytes(cur.try_into().unwrap());
            let new = match h.op() {
                Opcode::FetchAdd => Some(old.wrapping_add(a)),
                Opcode::CompareSwap => (old == a).then_some(b),
                _ => Some(1),
            };
            if let Some(v) = new {
                self.core.write(h.pid, h.va, &v.to_le_bytes())?;
            }
            Ok(old)
        })();
        let (status, value) = match result {
            Ok(old) => (Status::Ok, old.to_be_bytes().to_vec()),
            Err(s) => (s, Vec::new()),
        };
        self.remember(h, status, value.clone());
        self.complete(out, now, src, h, status, value);
    }

    fn exec_lock(&mut self, out: &mut Vec<Emit>, now: SimTime, src: NodeId, h: &Header) {
        if let Err(s) = self.core.translate(h.pid, h.va, Access::Write) {
            self.remember(h, s, Vec::new());
            return self.complete(out, now, src, h, s, Vec::new());
        }
        let key = (h.pid, h.va);
        if let Some(lock) = self.locks.get_mut(&key) {
            // A retry of a queued request keeps its place under the new id.
            if h.retry_of != 0 {
                if let Some(w) = lock
                    .waiters
                    .iter_mut()
                    .find(|w| w.header.request_id == h.retry_of || w.header.retry_of == h.retry_of)
                {
                    w.header = *h;
                    w.src = src;
                    let _ = self.finish(now);
                    return;
                }
            }
            if lock.waiters.len() >= self.cfg.max_lock_waiters {
                return self.complete(out, now, src, h, Status::Full, Vec::new());
            }
            lock.waiters.push_back(Waiter { src, header: *h });
            let _ = self.finish(now);
            return;
        }
        if self.locks.len() >= self.cfg.max_locks {
            return self.complete(out, now, src, h, Status::Full, Vec::new());
        }
        self.locks.insert(
            key,
            LockState {
                holder: h.request_id,
                waiters: VecDeque::new(),
            },
        );
        self.remember(h, Status::Ok, Vec::new());
        self.complete(out, now, src, h, Status::Ok, Vec::new());
    }

    fn exec_unlock(&mut self, out: &mut Vec<Emit>, now: SimTime, src: NodeId, h: &Header) {
        let key = (h.pid, h.va);
        let Some(lock) = self.locks.get_mut(&key) else {
            self.remember(h, Status::BadUnlock, Vec::new());
            return self.complete(out, now, src, h, Status::BadUnlock, Vec::new());
        };
        let next = lock.waiters.pop_front();
        match &next {
            Some(w) => lock.holder = w.header.request_id,
            None => {
                self.locks.remove(&key);
            }
        }
        self.remember(h, Status::Ok, Vec::new());
        self.complete(out, now, src, h, Status::Ok, Vec::new());
        if let Some(w) = next {
            let done = self.pipe.last_completion;
            self.remember(&w.header, Status::Ok, Vec::new());
            self.respond(out, w.src, &w.header, Status::Ok, Vec::new(), done);
        }
    }

    fn exec_meta(
        &mut self,
        out: &mut Vec<Emit>,
        now: SimTime,
        src: NodeId,
        h: &Header,
        payload: &[u8],
    ) {
        let mut r = codec::Reader::new(payload);
        let shift = self.core.page_shift;
        let result = match h.op() {
            Opcode::Alloc => match (r.u64(), r.u8()) {
                (Some(size), Some(perms)) => {
                    let region = region_of(h.va);
                    let lo = (region * REGION_SIZE) >> shift;
                    let hi = ((region + 1) * REGION_SIZE) >> shift;
                    let core = &mut self.core;
                    core.meta
                        .alloc_va(
                            &mut core.table,
                            h.pid,
                            size,
                            Perms::from_bits(perms),
                            lo.max(1)..hi,
                        )
                        .map(|o| {
                            core.stats.allocs += 1;
                            core.stats.alloc_retries += o.retries as u64;
                            core.stats.max_alloc_retries =
                                core.stats.max_alloc_retries.max(o.retries);
                            let mut v = Vec::new();
                            codec::put_u64(&mut v, o.va);
                            codec::put_u32(&mut v, o.retries);
                            v
                        })
                        .map_err(meta_status)
                }
                _ => Err(Status::InvalidArgument),
            },
            _ => match r.u64() {
                Some(size) => self.free_range(h.pid, h.va, size).map(|_| Vec::new()),
                None => Err(Status::InvalidArgument),
            },
        };
        let (status, value) = match result {
            Ok(v) => (Status::Ok, v),
            Err(s) => (s, Vec::new()),
        };
        self.remember(h, status, value.clone());
        let route = self.start(now) + self.cfg.step_ns;
        let done = route.max(self.pipe.slow_free_at) + self.cfg.meta_ns;
        self.pipe.slow_free_at = done;
        self.pipe.last_completion = self.pipe.last_completion.max(done);
        self.log(h, now, route, done);
        self.respond(out, src, h, status, value, done);
        self.report(out, done);
    }

    fn free_range(&mut self, pid: Pid, va: Va, size: u64) -> Result<(), Status> {
        let core = &mut self.core;
        let freed = core
            .meta
            .free_va(&mut core.table, &mut core.tlb, pid, va, size)
            .map_err(meta_status)?;
        core.stats.frees += 1;
        for ppn in &freed.released {
            core.memory.zero(ppn << core.page_shift, core.page_bytes());
        }
        let key = (pid, region_of(va));
        if let Some(n) = core.region_pages.get_mut(&key) {
            *n -= freed.released.len() as u64;
            if *n == 0 {
                core.region_pages.remove(&key);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn exec_ext(
        &mut self,
        out: &mut Vec<Emit>,
        now: SimTime,
        src: NodeId,
        h: &Header,
        code: u8,
        payload: &[u8],
        mutating: bool,
    ) {
        let idx = self.ext_routes[&code];
        let mut ctx = ExtCtx {
            core: &mut self.core,
            now,
            node: self.id,
        };
        let (status, value) = self.extensions[idx].handle(code, h, payload, &mut ctx);
        if mutating && value.len() <= dedup::MAX_VALUE_BYTES {
            self.remember(h, status, value.clone());
        }
        self.complete(out, now, src, h, status, value);
    }

    fn control(
        &mut self,
        out: &mut Vec<Emit>,
        now: SimTime,
        src: NodeId,
        h: &Header,
        payload: &[u8],
    ) {
        let mut r = codec::Reader::new(payload);
        let (Some(pid), Some(region)) = (r.u32(), r.u64()) else {
            return self.bad_op(out, src, h, now);
        };
        match h.op() {
            Opcode::Migrate => {
                let Some(dst) = r.u16() else {
                    return self.bad_op(out, src, h, now);
                };
                let snapshot = self.snapshot(pid, region);
                let mut mh = *h;
                mh.opcode = Opcode::MigrateData.code();
                out.push(Emit::Send {
                    dst: NodeId(dst),
                    depart: now + self.cfg.meta_ns,
                    bytes: Message::request(mh, snapshot).encode(),
                });
            }
            Opcode::MigrateData => {
                let status = match self.install(pid, region, &mut r) {
                    Ok(()) => Status::Ok,
                    Err(s) => s,
                };
                let mut dh = *h;
                dh.opcode = Opcode::MigrateDone.code();
                let mut p = Vec::new();
                codec::put_u32(&mut p, pid);
                codec::put_u64(&mut p, region);
                p.push(status.code());
                out.push(Emit::Send {
                    dst: self.controller,
                    depart: now + self.cfg.meta_ns,
                    bytes: Message::request(dh, p).encode(),
                });
                self.report(out, now + self.cfg.meta_ns);
            }
            _ => {
                let shift = self.core.page_shift;
                let window = Self::region_window(region, shift);
                for v in self.core.meta.vmas_in(pid, window) {
                    let _ = self.free_range(pid, v.start << shift, v.pages << shift);
                }
                self.core.region_access.remove(&(pid, region));
                self.report(out, now + self.cfg.meta_ns);
            }
        }
    }

    fn region_window(region: u64, shift: u32) -> std::ops::Range<Vpn> {
        ((region * REGION_SIZE) >> shift)..(((region + 1) * REGION_SIZE) >> shift)
    }

    /// Serializes every allocation of `(pid, region)` and the populated
    /// frames of its backed pages.
    fn snapshot(&mut self, pid: Pid, region: u64) -> Vec<u8> {
        let shift = self.core.page_shift;
        let vmas = self
            .core
            .meta
            .vmas_in(pid, Self::region_window(region, shift));
        let mut p = Vec::new();
        codec::put_u32(&mut p, pid);
        codec::put_u64(&mut p, region);
        codec::put_u32(&mut p, vmas.len() as u32);
        for v in &vmas {
            codec::put_u64(&mut p, v.start);
            codec::put_u64(&mut p, v.pages);
            p.push(v.perms.bits());
        }
        let mut backed = Vec::new();
        for v in &vmas {
            for vpn in v.start..v.end() {
                if let Some(pte) = self.core.table.peek(pid, vpn).filter(|e| e.valid) {
                    backed.push((vpn, pte.ppn));
                }
            }
        }
        codec::put_u32(&mut p, backed.len() as u32);
        for (vpn, ppn) in backed {
            let frames = self
                .core
                .memory
                .populated(ppn << shift, self.core.page_bytes());
            codec::put_u64(&mut p, vpn);
            codec::put_u32(&mut p, frames.len() as u32);
            for (off, bytes) in frames {
                codec::put_u64(&mut p, off);
                p.extend_from_slice(bytes);
            }
            self.core.stats.migrated_out_pages += 1;
        }
        p
    }

    fn install(&mut self, pid: Pid, region: u64, r: &mut codec::Reader<'_>) -> Result<(), Status> {
        let bad = Status::InvalidArgument;
        let n = r.u32().ok_or(bad)?;
        let mut vmas = Vec::new();
        for _ in 0..n {
            let (start, pages, perms) =
                (r.u64().ok_or(bad)?, r.u64().ok_or(bad)?, r.u8().ok_or(bad)?);
            vmas.push(Vma {
                start,
                pages,
                perms: Perms::from_bits(perms),
            });
        }
        let nb = r.u32().ok_or(bad)?;
        let mut pages = Vec::new();
        for _ in 0..nb {
            let vpn = r.u64().ok_or(bad)?;
            let nf = r.u32().ok_or(bad)?;
            let mut frames = Vec::new();
            for _ in 0..nf {
                let off = r.u64().ok_or(bad)?;
                frames.push((off, r.bytes(memory::FRAME_BYTES as usize).ok_or(bad)?));
            }
            pages.push((vpn, frames));
        }
        let backed: Vec<Vpn> = pages.iter().map(|(v, _)| *v).collect();
        let core = &mut self.core;
        let installed = core
            .meta
            .install_fixed(&mut core.table, pid, &vmas, &backed)
            .map_err(meta_status)?;
        let ppns: HashMap<Vpn, u64> = installed
            .iter()
            .filter_map(|i| i.ppn.map(|p| (i.vpn, p)))
            .collect();
        for (vpn, frames) in pages {
            let base = ppns[&vpn] << core.page_shift;
            core.memory.zero(base, core.page_bytes());
            for (off, bytes) in frames {
                core.memory.write(base + off, bytes);
            }
        }
        if !ppns.is_empty() {
            core.region_pages.insert((pid, region), ppns.len() as u64);
        }
        core.region_access.insert((pid, region), core.now);
        core.stats.migrated_in_pages += ppns.len() as u64;
        Ok(())
    }
}
