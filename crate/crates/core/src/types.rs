//! Identifiers and small value types shared by every layer.

use std::fmt;

/// Simulated time in nanoseconds.
pub type SimTime = u64;

/// Global process id.
pub type Pid = u32;

/// Virtual page number (`va >> log2(page_size)`).
pub type Vpn = u64;

/// Physical page number.
pub type Ppn = u64;

/// Virtual address in a process's remote address space.
pub type Va = u64;

/// Endpoint id on the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u16);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Permission set of a mapping. Only read and write exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
}

impl Perms {
    pub const NONE: Perms = Perms {
        read: false,
        write: false,
    };
    pub const R: Perms = Perms {
        read: true,
        write: false,
    };
    pub const RW: Perms = Perms {
        read: true,
        write: true,
    };

    pub fn bits(self) -> u8 {
        (self.read as u8) | ((self.write as u8) << 1)
    }

    pub fn from_bits(bits: u8) -> Perms {
        Perms {
            read: bits & 1 != 0,
            write: bits & 2 != 0,
        }
    }

    pub fn allows(self, access: Access) -> bool {
        match access {
            Access::Read => self.read,
            Access::Write => self.write,
        }
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = if self.read { 'r' } else { '-' };
        let w = if self.write { 'w' } else { '-' };
        write!(f, "{r}{w}")
    }
}

/// Kind of memory access being translated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
}

/// Page sizes a memory node may be configured with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PageSize {
    Size4K,
    Size2M,
    #[default]
    Size4M,
}

impl PageSize {
    pub fn bytes(self) -> u64 {
        match self {
            PageSize::Size4K => 4 << 10,
            PageSize::Size2M => 2 << 20,
            PageSize::Size4M => 4 << 20,
        }
    }

    pub fn shift(self) -> u32 {
        self.bytes().trailing_zeros()
    }

    pub fn from_bytes(bytes: u64) -> Option<PageSize> {
        match bytes {
            4096 => Some(PageSize::Size4K),
            0x20_0000 => Some(PageSize::Size2M),
            0x40_0000 => Some(PageSize::Size4M),
            _ => None,
        }
    }
}

/// Size of a remote address-space region owned by one memory node.
pub const REGION_SIZE: u64 = 1 << 30;

pub fn region_of(va: Va) -> u64 {
    va / REGION_SIZE
}
