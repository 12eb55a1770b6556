//! Deterministic model of a disaggregated memory system.
//!
//! Memory nodes ([`fast_path`]) translate addresses through an overflow-free
//! hash page table ([`page_table`], [`metadata`]) and serve connectionless
//! requests. Compute-node clients ([`clib`]) provide reliability, ordering
//! and congestion control. [`cluster`] wires nodes and a placement
//! controller over a fault-injecting discrete-event network ([`netsim`]).
//! Times are simulated nanoseconds.

pub mod apps;
pub mod clib;
pub mod cluster;
pub mod config;
pub mod fast_path;
pub mod lookup3;
pub mod metadata;
pub mod netsim;
pub mod page_table;
pub mod types;
pub mod wire;
