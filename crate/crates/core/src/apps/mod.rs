//! Services that run on the memory node's extend path, and the client-side
//! encoders for their requests.

pub mod chase;
pub mod kv;
pub mod mv;

use crate::fast_path::MemoryNode;

/// Registers every service on `node`, the `index`-th memory node.
pub fn install(node: &mut MemoryNode, index: u16) {
    node.register_extension(Box::new(chase::Chase));
    node.register_extension(Box::new(kv::KvService::new(kv::DEFAULT_BUCKETS)));
    node.register_extension(Box::new(mv::MvService::new(index)));
}
