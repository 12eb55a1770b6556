//! Bounded record of recently executed non-idempotent requests.

use std::collections::{HashMap, VecDeque};

use crate::wire::Status;

/// Accounted size of one record: id, alias, status and a short result.
pub const RECORD_BYTES: usize = 32;
/// Largest cached result that fits in a record.
pub const MAX_VALUE_BYTES: usize = RECORD_BYTES - 8 - 8 - 2;
pub const DEFAULT_CAPACITY_BYTES: usize = 30 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupRecord {
    pub id: u64,
    /// Original request id when `id` is itself a retry, else 0.
    pub alias: u64,
    pub status: Status,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct DedupBuffer {
    capacity_bytes: usize,
    records: VecDeque<(u64, DedupRecord)>,
    index: HashMap<u64, u64>,
    next_seq: u64,
}

impl DedupBuffer {
    pub fn new(capacity_bytes: usize) -> Self {
        DedupBuffer {
            capacity_bytes,
            records: VecDeque::new(),
            index: HashMap::new(),
            next_seq: 0,
        }
    }

    /// Capacity for `3 × timeout × bandwidth` bytes of request traffic,
    /// one record per `request_bytes`.
    pub fn derived_capacity(timeout_ns: u64, bandwidth_bps: u64, request_bytes: u64) -> usize {
        let bytes_in_window = 3 * timeout_ns as u128 * bandwidth_bps as u128 / 8 / 1_000_000_000;
        (bytes_in_window / request_bytes.max(1) as u128) as usize * RECORD_BYTES
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    pub fn used_bytes(&self) -> usize {
        self.records.len() * RECORD_BYTES
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Finds a record whose id or alias equals any non-zero key.
    pub fn lookup(&self, keys: &[u64]) -> Option<&DedupRecord> {
        let front = self.records.front()?.0;
        keys.iter()
            .filter(|&&k| k != 0)
            .find_map(|k| self.index.get(k))
            .map(|&seq| &self.records[(seq - front) as usize].1)
    }

    pub fn record(&mut self, record: DedupRecord) {
        assert!(
            record.value.len() <= MAX_VALUE_BYTES,
            "dedup value too large"
        );
        if self.capacity_bytes < RECORD_BYTES {
            return;
        }
        while self.used_bytes() + RECORD_BYTES > self.capacity_bytes {
            self.evict();
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.index.insert(record.id, seq);
        if record.alias != 0 {
            self.index.insert(record.alias, seq);
        }
        self.records.push_back((seq, record));
    }

    fn evict(&mut self) {
        if let Some((seq, r)) = self.records.pop_front() {
            for k in [r.id, r.alias] {
                if self.index.get(&k) == Some(&seq) {
                    self.index.remove(&k);
                }
            }
        }
    }

    pub fn records(&self) -> impl Iterator<Item = &DedupRecord> {
        self.records.iter().map(|(_, r)| r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, alias: u64) -> DedupRecord {
        DedupRecord {
            id,
            alias,
            status: Status::Ok,
            value: id.to_be_bytes().to_vec(),
        }
    }

    #[test]
    fn lookup_by_id_or_alias() {
        let mut d = DedupBuffer::new(1024);
        d.record(rec(5, 0));
        d.record(rec(9, 7));
        assert_eq!(d.lookup(&[5]).unwrap().id, 5);
        assert_eq!(d.lookup(&[1, 7]).unwrap().id, 9);
        assert!(d.lookup(&[0]).is_none());
        assert!(d.lookup(&[8]).is_none());
    }

    #[test]
    fn fifo_eviction_within_capacity() {
        let mut d = DedupBuffer::new(RECORD_BYTES * 3);
        for id in 1..=5 {
            d.record(rec(id, 0));
            assert!(d.used_bytes() <= d.capacity_bytes());
        }
        assert!(d.lookup(&[1]).is_none());
        assert!(d.lookup(&[2]).is_none());
        assert_eq!(d.lookup(&[3]).unwrap().id, 3);
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn derived_capacity_matches_window() {
        // 3 × 10 ms × 10 Gbit/s = 37.5 MB of traffic; one record per 1250 B.
        assert_eq!(
            DedupBuffer::derived_capacity(10_000_000, 10_000_000_000, 1250),
            30_000 * RECORD_BYTES
        );
    }
}
