//! On-the-wire message format shared by compute nodes, memory nodes and the
//! controller.
//!
//! Every packet starts with a fixed big-endian header:
//!
//! ```text
//! magic(2) | version(1) | opcode(1) | pid(4) | request_id(8) | retry_of(8)
//! | va(8) | total_len(4) | frag_seq(2) | frag_count(2) | payload
//! ```
//!
//! Responses carry the same fields with `opcode | 0x80` followed by a one-byte
//! status before the payload. `retry_of == 0` marks an original request.

use std::fmt;

use thiserror::Error;

use crate::types::{Pid, Va};

pub const MAGIC: u16 = 0xD15A;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 40;
pub const RESPONSE_HEADER_LEN: usize = HEADER_LEN + 1;
pub const RESPONSE_BIT: u8 = 0x80;
pub const DEFAULT_MTU: usize = 1500;

/// Request opcodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Read,
    Write,
    FetchAdd,
    CompareSwap,
    TestSet,
    Lock,
    Unlock,
    Fence,
    Alloc,
    Free,
    Ping,
    Assign,
    Hold,
    HoldAck,
    Resume,
    Migrate,
    MigrateData,
    MigrateDone,
    DropRegion,
    OccupancyReport,
    /// Extension handler `n` (`0..=EXT_MAX`).
    Ext(u8),
    Unknown(u8),
}

pub const EXT_BASE: u8 = 0x40;
pub const EXT_MAX: u8 = 0x3E;

impl Opcode {
    pub fn code(self) -> u8 {
        match self {
            Opcode::Read => 0x01,
            Opcode::Write => 0x02,
            Opcode::FetchAdd => 0x03,
            Opcode::CompareSwap => 0x04,
            Opcode::TestSet => 0x05,
            Opcode::Lock => 0x06,
            Opcode::Unlock => 0x07,
            Opcode::Fence => 0x08,
            Opcode::Alloc => 0x09,
            Opcode::Free => 0x0A,
            Opcode::Ping => 0x0B,
            Opcode::Assign => 0x20,
            Opcode::Hold => 0x21,
            Opcode::HoldAck => 0x22,
            Opcode::Resume => 0x23,
            Opcode::Migrate => 0x24,
            Opcode::MigrateData => 0x25,
            Opcode::MigrateDone => 0x26,
            Opcode::DropRegion => 0x27,
            Opcode::OccupancyReport => 0x28,
            Opcode::Ext(n) => EXT_BASE + n,
            Opcode::Unknown(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Opcode {
        match code {
            0x01 => Opcode::Read,
            0x02 => Opcode::Write,
            0x03 => Opcode::FetchAdd,
            0x04 => Opcode::CompareSwap,
            0x05 => Opcode::TestSet,
            0x06 => Opcode::Lock,
            0x07 => Opcode::Unlock,
            0x08 => Opcode::Fence,
            0x09 => Opcode::Alloc,
            0x0A => Opcode::Free,
            0x0B => Opcode::Ping,
            0x20 => Opcode::Assign,
            0x21 => Opcode::Hold,
            0x22 => Opcode::HoldAck,
            0x23 => Opcode::Resume,
            0x24 => Opcode::Migrate,
            0x25 => Opcode::MigrateData,
            0x26 => Opcode::MigrateDone,
            0x27 => Opcode::DropRegion,
            0x28 => Opcode::OccupancyReport,
            c if (EXT_BASE..=EXT_BASE + EXT_MAX).contains(&c) => Opcode::Ext(c - EXT_BASE),
            c => Opcode::Unknown(c),
        }
    }

    /// Operations whose re-execution changes state; the memory node keeps
    /// their ids and small results in the dedup buffer.
    pub fn is_non_idempotent(self) -> bool {
        matches!(
            self,
            Opcode::Write
                | Opcode::FetchAdd
                | Opcode::CompareSwap
                | Opcode::TestSet
                | Opcode::Lock
                | Opcode::Unlock
                | Opcode::Alloc
                | Opcode::Free
        )
    }

    pub fn is_control(self) -> bool {
        (0x20..0x40).contains(&self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Ok,
    Nack,
    Perm,
    BadOp,
    BadUnlock,
    OutOfVa,
    NotAllocated,
    InvalidArgument,
    NotFound,
    OutOfRange,
    Full,
    OutOfMemory,
    Other(u8),
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::Nack => 1,
            Status::Perm => 2,
            Status::BadOp => 3,
            Status::BadUnlock => 4,
            Status::OutOfVa => 5,
            Status::NotAllocated => 6,
            Status::InvalidArgument => 7,
            Status::NotFound => 8,
            Status::OutOfRange => 9,
            Status::Full => 10,
            Status::OutOfMemory => 11,
            Status::Other(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Status {
        match code {
            0 => Status::Ok,
            1 => Status::Nack,
            2 => Status::Perm,
            3 => Status::BadOp,
            4 => Status::BadUnlock,
            5 => Status::OutOfVa,
            6 => Status::NotAllocated,
            7 => Status::InvalidArgument,
            8 => Status::NotFound,
            9 => Status::OutOfRange,
            10 => Status::Full,
            11 => Status::OutOfMemory,
            c => Status::Other(c),
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Ok => "OK",
            Status::Nack => "NACK",
            Status::Perm => "PERM",
            Status::BadOp => "BAD_OP",
            Status::BadUnlock => "BAD_UNLOCK",
            Status::OutOfVa => "OUT_OF_VA",
            Status::NotAllocated => "NOT_ALLOCATED",
            Status::InvalidArgument => "INVALID_ARGUMENT",
            Status::NotFound => "NOT_FOUND",
            Status::OutOfRange => "OUT_OF_RANGE",
            Status::Full => "FULL",
            Status::OutOfMemory => "OUT_OF_MEMORY",
            Status::Other(c) => return write!(f, "STATUS_{c}"),
        };
        f.write_str(s)
    }
}

/// Header fields common to requests and responses. `opcode` is the raw byte
/// (with the response bit set on responses).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub opcode: u8,
    pub pid: Pid,
    pub request_id: u64,
    pub retry_of: u64,
    pub va: Va,
    pub total_len: u32,
    pub frag_seq: u16,
    pub frag_count: u16,
}

impl Header {
    pub fn request(op: Opcode, pid: Pid, request_id: u64, va: Va, total_len: u32) -> Header {
        Header {
            opcode: op.code(),
            pid,
            request_id,
            retry_of: 0,
            va,
            total_len,
            frag_seq: 0,
            frag_count: 1,
        }
    }

    pub fn op(&self) -> Opcode {
        Opcode::from_code(self.opcode & !RESPONSE_BIT)
    }

    /// The response header for this request.
    pub fn reply(&self) -> Header {
        Header {
            opcode: self.opcode | RESPONSE_BIT,
            ..*self
        }
    }

    pub fn is_original(&self) -> bool {
        self.retry_of == 0
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC.to_be_bytes());
        out.push(VERSION);
        out.push(self.opcode);
        out.extend_from_slice(&self.pid.to_be_bytes());
        out.extend_from_slice(&self.request_id.to_be_bytes());
        out.extend_from_slice(&self.retry_of.to_be_bytes());
        out.extend_from_slice(&self.va.to_be_bytes());
        out.extend_from_slice(&self.total_len.to_be_bytes());
        out.extend_from_slice(&self.frag_seq.to_be_bytes());
        out.extend_from_slice(&self.frag_count.to_be_bytes());
    }

    /// Parses the fixed header, checking magic and version.
    pub fn parse(bytes: &[u8]) -> Result<Header, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Truncated(bytes.len()));
        }
        let magic = u16::from_be_bytes([bytes[0], bytes[1]]);
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        if bytes[2] != VERSION {
            return Err(WireError::BadVersion(bytes[2]));
        }
        let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_be_bytes(bytes[i..i + 8].try_into().unwrap());
        let u16_at = |i: usize| u16::from_be_bytes(bytes[i..i + 2].try_into().unwrap());
        Ok(Header {
            opcode: bytes[3],
            pid: u32_at(4),
            request_id: u64_at(8),
            retry_of: u64_at(16),
            va: u64_at(24),
            total_len: u32_at(32),
            frag_seq: u16_at(36),
            frag_count: u16_at(38),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("packet truncated at {0} bytes")]
    Truncated(usize),
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    BadVersion(u8),
}

/// A decoded request or response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub header: Header,
    /// Present on responses only.
    pub status: Option<Status>,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn request(header: Header, payload: Vec<u8>) -> Message {
        Message {
            header,
            status: None,
            payload,
        }
    }

    pub fn response(header: Header, status: Status, payload: Vec<u8>) -> Message {
        Message {
            header,
            status: Some(status),
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let extra = self.status.is_some() as usize;
        let mut out = Vec::with_capacity(HEADER_LEN + extra + self.payload.len());
        self.header.write(&mut out);
        if let Some(s) = self.status {
            out.push(s.code());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode_request(bytes: &[u8]) -> Result<Message, WireError> {
        let header = Header::parse(bytes)?;
        Ok(Message::request(header, bytes[HEADER_LEN..].to_vec()))
    }

    pub fn decode_response(bytes: &[u8]) -> Result<Message, WireError> {
        let header = Header::parse(bytes)?;
        if bytes.len() < RESPONSE_HEADER_LEN {
            return Err(WireError::Truncated(bytes.len()));
        }
        Ok(Message::response(
            header,
            Status::from_code(bytes[HEADER_LEN]),
            bytes[RESPONSE_HEADER_LEN..].to_vec(),
        ))
    }
}

/// Splits `data` into `ceil(len / mtu)` fragments (at least one).
pub fn fragment(data: &[u8], mtu: usize) -> Vec<&[u8]> {
    if data.is_empty() {
        return vec![&data[0..0]];
    }
    data.chunks(mtu).collect()
}

pub fn fragment_count(len: usize, mtu: usize) -> u16 {
    len.div_ceil(mtu).max(1) as u16
}

/// Little helpers for the fixed-width payload fields used by atomics,
/// allocation and the extension sub-headers.
pub mod codec {
    pub fn put_u64(out: &mut Vec<u8>, v: u64) {
        out.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_u32(out: &mut Vec<u8>, v: u32) {
        out.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_u16(out: &mut Vec<u8>, v: u16) {
        out.extend_from_slice(&v.to_be_bytes());
    }

    /// Cursor over a payload; every getter returns `None` past the end.
    pub struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        pub fn new(buf: &'a [u8]) -> Self {
            Reader { buf, pos: 0 }
        }

        pub fn bytes(&mut self, n: usize) -> Option<&'a [u8]> {
            let end = self.pos.checked_add(n)?;
            let out = self.buf.get(self.pos..end)?;
            self.pos = end;
            Some(out)
        }

        pub fn u8(&mut self) -> Option<u8> {
            self.bytes(1).map(|b| b[0])
        }

        pub fn u16(&mut self) -> Option<u16> {
            self.bytes(2)
                .map(|b| u16::from_be_bytes(b.try_into().unwrap()))
        }

        pub fn u32(&mut self) -> Option<u32> {
            self.bytes(4)
                .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        }

        pub fn u64(&mut self) -> Option<u64> {
            self.bytes(8)
                .map(|b| u64::from_be_bytes(b.try_into().unwrap()))
        }

        pub fn rest(&mut self) -> &'a [u8] {
            let out = &self.buf[self.pos..];
            self.pos = self.buf.len();
            out
        }

        pub fn remaining(&self) -> usize {
            self.buf.len() - self.pos
        }
    }
}
