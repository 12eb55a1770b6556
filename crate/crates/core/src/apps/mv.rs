//! Multi-version object store running at the memory node.
//!
//! An object is a header `(capacity u32, slot_bytes u32, count u64)`
//! followed by `capacity` slots of `len u32` plus `slot_bytes` of data,
//! indexed by version number, so reading any version costs the same.
//! Object ids carry the memory node index in their top 16 bits and the
//! header VA below.

use crate::clib::Op;
use crate::fast_path::{ExtCtx, Extension};
use crate::types::{NodeId, Pid, Va};
use crate::wire::{codec, Header, Status};

pub const CREATE: u8 = 5;
pub const APPEND: u8 = 6;
pub const READ: u8 = 7;
pub const SERVICE_PID: Pid = 0xFFFF_FF01;
/// Version selector for the newest version.
pub const LATEST: u64 = u64::MAX;
const HEADER_BYTES: u64 = 16;
const VA_MASK: u64 = (1 << 48) - 1;

/// Memory node index encoded in an object id.
pub fn node_index(id: u64) -> u16 {
    (id >> 48) as u16
}

pub fn create_op(node: NodeId, capacity: u32, slot_bytes: u32) -> Op {
    let mut p = Vec::new();
    codec::put_u32(&mut p, capacity);
    codec::put_u32(&mut p, slot_bytes);
    ext(node, CREATE, p, true, 8)
}

pub fn append_op(node: NodeId, id: u64, data: &[u8]) -> Op {
    let mut p = Vec::new();
    codec::put_u64(&mut p, id);
    p.extend_from_slice(data);
    ext(node, APPEND, p, true, 8)
}

pub fn read_op(node: NodeId, id: u64, version: u64, slot_bytes: u32) -> Op {
    let mut p = Vec::new();
    codec::put_u64(&mut p, id);
    codec::put_u64(&mut p, version);
    ext(node, READ, p, false, slot_bytes)
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

pub struct MvService {
    index: u16,
}

struct Object {
    va: Va,
    capacity: u64,
    slot: u64,
    count: u64,
}

impl Object {
    fn slot_va(&self, version: u64) -> Va {
        self.va + HEADER_BYTES + version * (4 + self.slot)
    }
}

impl MvService {
    pub fn new(index: u16) -> Self {
        MvService { index }
    }

    fn open(&self, ctx: &mut ExtCtx<'_>, id: u64) -> Result<Object, Status> {
        if node_index(id) != self.index {
            return Err(Status::InvalidArgument);
        }
        let va = id & VA_MASK;
        let h = ctx.read(SERVICE_PID, va, HEADER_BYTES)?;
        Ok(Object {
            va,
            capacity: u32::from_le_bytes(h[..4].try_into().unwrap()) as u64,
            slot: u32::from_le_bytes(h[4..8].try_into().unwrap()) as u64,
            count: u64::from_le_bytes(h[8..].try_into().unwrap()),
        })
    }

    fn create(&self, ctx: &mut ExtCtx<'_>, capacity: u32, slot: u32) -> Result<u64, Status> {
        if capacity == 0 {
            return Err(Status::InvalidArgument);
        }
        let size = HEADER_BYTES + capacity as u64 * (4 + slot as u64);
        let va = ctx.alloc(SERVICE_PID, size)?;
        let mut h = Vec::with_capacity(16);
        h.extend_from_slice(&capacity.to_le_bytes());
        h.extend_from_slice(&slot.to_le_bytes());
        h.extend_from_slice(&0u64.to_le_bytes());
        ctx.write(SERVICE_PID, va, &h)?;
        Ok(((self.index as u64) << 48) | va)
    }

    fn append(&self, ctx: &mut ExtCtx<'_>, id: u64, data: &[u8]) -> Result<u64, Status> {
        let o = self.open(ctx, id)?;
        if data.len() as u64 > o.slot {
            return Err(Status::InvalidArgument);
        }
        if o.count >= o.capacity {
            return Err(Status::Full);
        }
        let mut rec = (data.len() as u32).to_le_bytes().to_vec();
        rec.extend_from_slice(data);
        ctx.write(SERVICE_PID, o.slot_va(o.count), &rec)?;
        ctx.write_u64(SERVICE_PID, o.va + 8, o.count + 1)?;
        Ok(o.count)
    }

    fn read(&self, ctx: &mut ExtCtx<'_>, id: u64, version: u64) -> Result<Vec<u8>, Status> {
        let o = self.open(ctx, id)?;
        let v = if version == LATEST {
            o.count.checked_sub(1)
        } else {
            Some(version)
        };
        let v = v.filter(|&v| v < o.count).ok_or(Status::OutOfRange)?;
        let len = ctx.read(SERVICE_PID, o.slot_va(v), 4)?;
        let len = u32::from_le_bytes(len.try_into().unwrap()) as u64;
        ctx.read(SERVICE_PID, o.slot_va(v) + 4, len)
    }
}

impl Extension for MvService {
    fn codes(&self) -> Vec<u8> {
        vec![CREATE, APPEND, READ]
    }

    fn mutates(&self, code: u8) -> bool {
        code != READ
    }

    fn handle(
        &mut self,
        code: u8,
        _req: &Header,
        payload: &[u8],
        ctx: &mut ExtCtx<'_>,
    ) -> (Status, Vec<u8>) {
        let mut r = codec::Reader::new(payload);
        let result = match code {
            CREATE => match (r.u32(), r.u32()) {
                (Some(cap), Some(slot)) => self
                    .create(ctx, cap, slot)
                    .map(|id| id.to_be_bytes().to_vec()),
                _ => Err(Status::InvalidArgument),
            },
            APPEND => match r.u64() {
                Some(id) => self
                    .append(ctx, id, r.rest())
                    .map(|v| v.to_be_bytes().to_vec()),
                None => Err(Status::InvalidArgument),
            },
            _ => match (r.u64(), r.u64()) {
                (Some(id), Some(v)) => self.read(ctx, id, v),
                _ => Err(Status::InvalidArgument),
            },
        };
        match result {
            Ok(v) => (Status::Ok, v),
            Err(s) => (s, Vec::new()),
        }
    }
}
