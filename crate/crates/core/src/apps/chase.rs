//! Pointer chasing executed at the memory node.
//!
//! Walks a linked list in the caller's address space and returns the first
//! node whose key field equals the match value. Node fields are
//! little-endian `u64`s at fixed offsets; a next pointer of 0 ends the list.

use crate::clib::Op;
use crate::fast_path::{ExtCtx, Extension};
use crate::types::Va;
use crate::wire::{codec, Header, Status};

pub const CODE: u8 = 1;
/// Largest node a chase may read.
pub const MAX_NODE_BYTES: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChaseRequest {
    pub head: Va,
    pub key: u64,
    pub key_offset: u32,
    pub next_offset: u32,
    pub max_hops: u32,
    pub node_len: u32,
}

impl ChaseRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut p = Vec::with_capacity(32);
        codec::put_u64(&mut p, self.head);
        codec::put_u64(&mut p, self.key);
        codec::put_u32(&mut p, self.key_offset);
        codec::put_u32(&mut p, self.next_offset);
        codec::put_u32(&mut p, self.max_hops);
        codec::put_u32(&mut p, self.node_len);
        p
    }

    pub fn decode(p: &[u8]) -> Option<ChaseRequest> {
        let mut r = codec::Reader::new(p);
        Some(ChaseRequest {
            head: r.u64()?,
            key: r.u64()?,
            key_offset: r.u32()?,
            next_offset: r.u32()?,
            max_hops: r.u32()?,
            node_len: r.u32()?,
        })
    }

    /// The request as a client operation, routed to the owner of `head`.
    pub fn op(&self) -> Op {
        Op::Ext {
            node: None,
            va: self.head,
            code: CODE,
            payload: self.encode(),
            mutates: false,
            reply_bytes: 8 + self.node_len,
        }
    }
}

/// Decodes a chase reply: `None` when nothing matched.
pub fn decode_reply(p: &[u8]) -> Option<(Va, Vec<u8>)> {
    if p.len() < 8 {
        return None;
    }
    Some((
        u64::from_be_bytes(p[..8].try_into().unwrap()),
        p[8..].to_vec(),
    ))
}

pub struct Chase;

impl Extension for Chase {
    fn codes(&self) -> Vec<u8> {
        vec![CODE]
    }

    fn mutates(&self, _code: u8) -> bool {
        false
    }

    fn handle(
        &mut self,
        _code: u8,
        req: &Header,
        payload: &[u8],
        ctx: &mut ExtCtx<'_>,
    ) -> (Status, Vec<u8>) {
        let Some(c) = ChaseRequest::decode(payload) else {
            return (Status::InvalidArgument, Vec::new());
        };
        let field = |off: u32| off.checked_add(8).is_some_and(|end| end <= c.node_len);
        if c.node_len > MAX_NODE_BYTES || !field(c.key_offset) || !field(c.next_offset) {
            return (Status::InvalidArgument, Vec::new());
        }
        let le = |node: &[u8], off: u32| {
            let o = off as usize;
            u64::from_le_bytes(node[o..o + 8].try_into().unwrap())
        };
        let mut cur = c.head;
        for _ in 0..c.max_hops {
            if cur == 0 {
                break;
            }
            let node = match ctx.read(req.pid, cur, c.node_len as u64) {
                Ok(n) => n,
                Err(s) => return (s, Vec::new()),
            };
            if le(&node, c.key_offset) == c.key {
                let mut out = cur.to_be_bytes().to_vec();
                out.extend_from_slice(&node);
                return (Status::Ok, out);
            }
            cur = le(&node, c.next_offset);
        }
        (Status::Ok, Vec::new())
    }
}
