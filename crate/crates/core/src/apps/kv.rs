//! Chained-bucket key-value store running at the memory node.
//!
//! The bucket array and every slot live in the service's own address space.
//! A slot is 128 bytes: the next-slot VA followed by seven entries of
//! (record VA, fingerprint, present). Records hold `key_len u32, value_len
//! u32, key, value`, all little-endian. Every request runs to completion at
//! the owning node, which is the single serialization point for its keys.

use crate::clib::Op;
use crate::fast_path::{ExtCtx, Extension};
use crate::lookup3::hashlittle;
use crate::types::{NodeId, Pid, Va};
use crate::wire::{Header, Status};

pub const SET: u8 = 2;
pub const GET: u8 = 3;
pub const DELETE: u8 = 4;
pub const DEFAULT_BUCKETS: u64 = 1024;
/// Process id owning the service's memory on every node.
pub const SERVICE_PID: Pid = 0xFFFF_FF00;
pub const SLOT_BYTES: u64 = 128;
pub const ENTRIES_PER_SLOT: u64 = 7;
const ENTRY_BYTES: u64 = 16;
const ARENA_CHUNK: u64 = 256 * 1024;

pub fn hash(key: &[u8]) -> u32 {
    hashlittle(key, 0)
}

/// 8-bit tag stored beside each entry.
pub fn fingerprint(key: &[u8]) -> u8 {
    hash(key) as u8
}

/// Index of the memory node serving `key` among `nodes` nodes.
pub fn partition(key: &[u8], nodes: usize) -> usize {
    hashlittle(key, 1) as usize % nodes.max(1)
}

pub fn set_op(node: NodeId, key: &[u8], value: &[u8]) -> Op {
    let mut payload = (key.len() as u16).to_be_bytes().to_vec();
    payload.extend_from_slice(key);
    payload.extend_from_slice(value);
    ext(node, SET, payload, true, 0)
}

pub fn get_op(node: NodeId, key: &[u8], max_value: u32) -> Op {
    ext(node, GET, key.to_vec(), false, max_value)
}

pub fn delete_op(node: NodeId, key: &[u8]) -> Op {
    ext(node, DELETE, key.to_vec(), true, 0)
}

fn ext(node: NodeId, code: u8, payload: Vec<u8>, mutates: bool, reply_bytes: u32) -> Op {
    Op::Ext {
        node: Some(node),
        va: 0,
        code,
        payload,
        mutates,
        reply_bytes,
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct KvStats {
    pub slots_allocated: u64,
    /// Entries whose fingerprint matched but whose key did not.
    pub fingerprint_collisions: u64,
}

pub struct KvService {
    buckets: u64,
    table: Option<Va>,
    arena: Va,
    arena_end: Va,
    stats: KvStats,
}

/// Location of a present entry.
struct Hit {
    entry: Va,
    record: Va,
}

type KvResult<T> = Result<T, Status>;

impl KvService {
    pub fn new(buckets: u64) -> Self {
        KvService {
            buckets: buckets.max(1),
            table: None,
            arena: 0,
            arena_end: 0,
            stats: KvStats::default(),
        }
    }

    pub fn stats(&self) -> KvStats {
        self.stats
    }

    fn table(&mut self, ctx: &mut ExtCtx<'_>) -> KvResult<Va> {
        if let Some(t) = self.table {
            return Ok(t);
        }
        let t = ctx.alloc(SERVICE_PID, self.buckets * SLOT_BYTES)?;
        self.table = Some(t);
        Ok(t)
    }

    /// Bump allocation from page-backed chunks; space is never reclaimed.
    fn carve(&mut self, ctx: &mut ExtCtx<'_>, len: u64) -> KvResult<Va> {
        let len = len.next_multiple_of(8);
        if self.arena + len > self.arena_end || self.arena == 0 {
            let chunk = ARENA_CHUNK.max(ctx.page_bytes()).max(len);
            self.arena = ctx.alloc(SERVICE_PID, chunk)?;
            self.arena_end = self.arena + chunk;
        }
        let va = self.arena;
        self.arena += len;
        Ok(va)
    }

    fn put_record(&mut self, ctx: &mut ExtCtx<'_>, key: &[u8], value: &[u8]) -> KvResult<Va> {
        let mut rec = Vec::with_capacity(8 + key.len() + value.len());
        rec.extend_from_slice(&(key.len() as u32).to_le_bytes());
        rec.extend_from_slice(&(value.len() as u32).to_le_bytes());
        rec.extend_from_slice(key);
        rec.extend_from_slice(value);
        let va = self.carve(ctx, rec.len() as u64)?;
        ctx.write(SERVICE_PID, va, &rec)?;
        Ok(va)
    }

    fn record_key(ctx: &mut ExtCtx<'_>, record: Va) -> KvResult<Vec<u8>> {
        let hdr = ctx.read(SERVICE_PID, record, 8)?;
        let klen = u32::from_le_bytes(hdr[..4].try_into().unwrap()) as u64;
        ctx.read(SERVICE_PID, record + 8, klen)
    }

    /// Walks the bucket chain. Returns the matching entry, if any, and the
    /// last slot of the chain.
    fn find(&mut self, ctx: &mut ExtCtx<'_>, key: &[u8]) -> KvResult<(Option<Hit>, Va)> {
        let table = self.table(ctx)?;
        let h = hash(key);
        let fp = h as u8;
        let mut slot = table + (h as u64 % self.buckets) * SLOT_BYTES;
        loop {
            let bytes = ctx.read(SERVICE_PID, slot, SLOT_BYTES)?;
            for i in 0..ENTRIES_PER_SLOT as usize {
                let e = &bytes[8 + i * 16..8 + (i + 1) * 16];
                if e[9] == 0 || e[8] != fp {
                    continue;
                }
                let record = u64::from_le_bytes(e[..8].try_into().unwrap());
                if Self::record_key(ctx, record)? == key {
                    let entry = slot + 8 + i as u64 * ENTRY_BYTES;
                    return Ok((Some(Hit { entry, record }), slot));
                }
                self.stats.fingerprint_collisions += 1;
            }
            let next = u64::from_le_bytes(bytes[..8].try_into().unwrap());
            if next == 0 {
                return Ok((None, slot));
            }
            slot = next;
        }
    }

    fn entry_bytes(record: Va, fp: u8) -> [u8; 16] {
        let mut e = [0u8; 16];
        e[..8].copy_from_slice(&record.to_le_bytes());
        e[8] = fp;
        e[9] = 1;
        e
    }

    fn set(&mut self, ctx: &mut ExtCtx<'_>, key: &[u8], value: &[u8]) -> KvResult<()> {
        let (hit, last) = self.find(ctx, key)?;
        let record = self.put_record(ctx, key, value)?;
        let fp = fingerprint(key);
        if let Some(hit) = hit {
            return ctx.write(SERVICE_PID, hit.entry, &Self::entry_bytes(record, fp));
        }
        let bytes = ctx.read(SERVICE_PID, last, SLOT_BYTES)?;
        let free = (0..ENTRIES_PER_SLOT as usize).find(|&i| bytes[8 + i * 16 + 9] == 0);
        let entry = match free {
            Some(i) => last + 8 + i as u64 * ENTRY_BYTES,
            None => {
                let slot = self.carve(ctx, SLOT_BYTES)?;
                ctx.write(SERVICE_PID, slot, &[0u8; SLOT_BYTES as usize])?;
                ctx.write_u64(SERVICE_PID, last, slot)?;
                self.stats.slots_allocated += 1;
                slot + 8
            }
        };
        ctx.write(SERVICE_PID, entry, &Self::entry_bytes(record, fp))
    }

    fn get(&mut self, ctx: &mut ExtCtx<'_>, key: &[u8]) -> KvResult<Vec<u8>> {
        let (Some(hit), _) = self.find(ctx, key)? else {
            return Err(Status::NotFound);
        };
        let hdr = ctx.read(SERVICE_PID, hit.record, 8)?;
        let klen = u32::from_le_bytes(hdr[..4].try_into().unwrap()) as u64;
        let vlen = u32::from_le_bytes(hdr[4..].try_into().unwrap()) as u64;
        ctx.read(SERVICE_PID, hit.record + 8 + klen, vlen)
    }

    fn delete(&mut self, ctx: &mut ExtCtx<'_>, key: &[u8]) -> KvResult<()> {
        let (Some(hit), _) = self.find(ctx, key)? else {
            return Err(Status::NotFound);
        };
        ctx.write(SERVICE_PID, hit.entry + 9, &[0])
    }
}

impl Extension for KvService {
    fn codes(&self) -> Vec<u8> {
        vec![SET, GET, DELETE]
    }

    fn mutates(&self, code: u8) -> bool {
        code != GET
    }

    fn stats(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("kv_slots_allocated", self.stats.slots_allocated),
            (
                "kv_fingerprint_collisions",
                self.stats.fingerprint_collisions,
            ),
        ]
    }

    fn handle(
        &mut self,
        code: u8,
        _req: &Header,
        payload: &[u8],
        ctx: &mut ExtCtx<'_>,
    ) -> (Status, Vec<u8>) {
        let result = match code {
            SET => {
                if payload.len() < 2 {
                    return (Status::InvalidArgument, Vec::new());
                }
                let klen = u16::from_be_bytes([payload[0], payload[1]]) as usize;
                if payload.len() < 2 + klen {
                    return (Status::InvalidArgument, Vec::new());
                }
                let (key, value) = payload[2..].split_at(klen);
                self.set(ctx, key, value).map(|_| Vec::new())
            }
            GET => self.get(ctx, payload),
            _ => self.delete(ctx, payload).map(|_| Vec::new()),
        };
        match result {
            Ok(v) => (Status::Ok, v),
            Err(s) => (s, Vec::new()),
        }
    }
}
