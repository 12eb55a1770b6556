//! Address translation structures of a memory node.
//!
//! All processes share one hash page table whose size is fixed by the amount
//! of physical memory. Each bucket holds `K` slots and is always fetched as a
//! whole, so a lookup costs exactly one bucket read. Overflow is never resolved
//! here: the metadata plane picks virtual addresses whose buckets have room.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::lookup3::hashlittle;
use crate::types::{Perms, Pid, Ppn, Vpn};

/// Bytes one slot occupies in the modelled DRAM layout
/// (pid 4 | perms+flags 4 | vpn 8 | ppn 8, rounded up).
pub const SLOT_BYTES: u64 = 24;

pub const DEFAULT_SLOTS_PER_BUCKET: usize = 8;
pub const DEFAULT_OVERPROVISION: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageTableEntry {
    pub pid: Pid,
    pub vpn: Vpn,
    pub ppn: Ppn,
    pub perms: Perms,
    /// A physical page has been assigned.
    pub valid: bool,
    /// The slot is occupied.
    pub present: bool,
}

impl PageTableEntry {
    /// A present-but-invalid entry as written at allocation time.
    pub fn unbacked(pid: Pid, vpn: Vpn, perms: Perms) -> Self {
        PageTableEntry {
            pid,
            vpn,
            ppn: 0,
            perms,
            valid: false,
            present: true,
        }
    }

    pub fn key(&self) -> (Pid, Vpn) {
        (self.pid, self.vpn)
    }

    const EMPTY: PageTableEntry = PageTableEntry {
        pid: 0,
        vpn: 0,
        ppn: 0,
        perms: Perms::NONE,
        valid: false,
        present: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum InsertError {
    #[error("bucket {bucket} is full")]
    Overflow { bucket: usize },
    #[error("pid {pid} vpn {vpn:#x} already mapped")]
    Duplicate { pid: Pid, vpn: Vpn },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("pid {pid} vpn {vpn:#x} not mapped")]
pub struct NotFound {
    pub pid: Pid,
    pub vpn: Vpn,
}

/// Bucket index of `(pid, vpn)`: lookup3 over the little-endian bytes of the
/// pid followed by the vpn, reduced modulo `num_buckets`.
pub fn hash_index(pid: Pid, vpn: Vpn, num_buckets: usize) -> usize {
    assert!(num_buckets >= 1, "num_buckets must be at least 1");
    let mut key = [0u8; 12];
    key[..4].copy_from_slice(&pid.to_le_bytes());
    key[4..].copy_from_slice(&vpn.to_le_bytes());
    (hashlittle(&key, 0) as u64 % num_buckets as u64) as usize
}

/// Geometry of a hash page table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableGeometry {
    pub num_buckets: usize,
    pub slots_per_bucket: usize,
}

impl TableGeometry {
    /// Sizes the table to `overprovision × physical pages` slots.
    pub fn for_memory(
        physical_bytes: u64,
        page_bytes: u64,
        slots_per_bucket: usize,
        overprovision: u64,
    ) -> Self {
        let pages = (physical_bytes / page_bytes).max(1);
        let slots = pages * overprovision.max(1);
        let num_buckets = slots.div_ceil(slots_per_bucket as u64).max(1) as usize;
        TableGeometry {
            num_buckets,
            slots_per_bucket,
        }
    }

    pub fn total_slots(&self) -> usize {
        self.num_buckets * self.slots_per_bucket
    }

    pub fn table_bytes(&self) -> u64 {
        self.total_slots() as u64 * SLOT_BYTES
    }
}

/// Fixed-size, overflow-free hash page table.
#[derive(Debug, Clone)]
pub struct HashPageTable {
    geometry: TableGeometry,
    slots: Vec<PageTableEntry>,
    bucket_fetches: Cell<u64>,
}

impl HashPageTable {
    pub fn new(geometry: TableGeometry) -> Self {
        assert!(geometry.num_buckets >= 1 && geometry.slots_per_bucket >= 1);
        HashPageTable {
            geometry,
            slots: vec![PageTableEntry::EMPTY; geometry.total_slots()],
            bucket_fetches: Cell::new(0),
        }
    }

    pub fn geometry(&self) -> TableGeometry {
        self.geometry
    }

    pub fn num_buckets(&self) -> usize {
        self.geometry.num_buckets
    }

    pub fn slots_per_bucket(&self) -> usize {
        self.geometry.slots_per_bucket
    }

    pub fn table_bytes(&self) -> u64 {
        self.geometry.table_bytes()
    }

    pub fn bucket_of(&self, pid: Pid, vpn: Vpn) -> usize {
        hash_index(pid, vpn, self.geometry.num_buckets)
    }

    /// Number of bucket reads performed so far.
    pub fn bucket_fetches(&self) -> u64 {
        self.bucket_fetches.get()
    }

    fn bucket(&self, index: usize) -> &[PageTableEntry] {
        let k = self.geometry.slots_per_bucket;
        &self.slots[index * k..(index + 1) * k]
    }

    fn bucket_mut(&mut self, index: usize) -> &mut [PageTableEntry] {
        let k = self.geometry.slots_per_bucket;
        &mut self.slots[index * k..(index + 1) * k]
    }

    /// Reads the whole bucket for `(pid, vpn)` once and scans it.
    pub fn lookup(&self, pid: Pid, vpn: Vpn) -> Option<PageTableEntry> {
        self.bucket_fetches.set(self.bucket_fetches.get() + 1);
        let b = self.bucket_of(pid, vpn);
        self.bucket(b)
            .iter()
            .find(|e| e.present && e.pid == pid && e.vpn == vpn)
            .copied()
    }

    /// Like [`lookup`](Self::lookup) but not counted; for inspection only.
    pub fn peek(&self, pid: Pid, vpn: Vpn) -> Option<PageTableEntry> {
        let b = self.bucket_of(pid, vpn);
        self.bucket(b)
            .iter()
            .find(|e| e.present && e.pid == pid && e.vpn == vpn)
            .copied()
    }

    /// Places `entry` in the first free slot of its bucket.
    pub fn insert(&mut self, entry: PageTableEntry) -> Result<usize, InsertError> {
        let b = self.bucket_of(entry.pid, entry.vpn);
        let bucket = self.bucket_mut(b);
        if bucket
            .iter()
            .any(|e| e.present && e.pid == entry.pid && e.vpn == entry.vpn)
        {
            return Err(InsertError::Duplicate {
                pid: entry.pid,
                vpn: entry.vpn,
            });
        }
        let slot = bucket
            .iter_mut()
            .find(|e| !e.present)
            .ok_or(InsertError::Overflow { bucket: b })?;
        *slot = PageTableEntry {
            present: true,
            ..entry
        };
        Ok(b)
    }

    /// Rewrites an existing entry in place (used to validate it on a fault).
    pub fn update(&mut self, entry: PageTableEntry) -> Result<(), NotFound> {
        let b = self.bucket_of(entry.pid, entry.vpn);
        let slot = self
            .bucket_mut(b)
            .iter_mut()
            .find(|e| e.present && e.pid == entry.pid && e.vpn == entry.vpn)
            .ok_or(NotFound {
                pid: entry.pid,
                vpn: entry.vpn,
            })?;
        *slot = PageTableEntry {
            present: true,
            ..entry
        };
        Ok(())
    }

    /// Frees the slot holding `(pid, vpn)` and returns its previous content.
    pub fn remove(&mut self, pid: Pid, vpn: Vpn) -> Result<PageTableEntry, NotFound> {
        let b = self.bucket_of(pid, vpn);
        let slot = self
            .bucket_mut(b)
            .iter_mut()
            .find(|e| e.present && e.pid == pid && e.vpn == vpn)
            .ok_or(NotFound { pid, vpn })?;
        let old = *slot;
        *slot = PageTableEntry::EMPTY;
        Ok(old)
    }

    /// Present slots in bucket `index` (no fetch is charged).
    pub fn bucket_occupancy(&self, index: usize) -> usize {
        self.bucket(index).iter().filter(|e| e.present).count()
    }

    /// All present entries, in bucket/slot order. Test and snapshot use only.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, &PageTableEntry)> {
        let k = self.geometry.slots_per_bucket;
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, e)| e.present)
            .map(move |(i, e)| (i / k, i % k, e))
    }

    pub fn present_count(&self) -> usize {
        self.slots.iter().filter(|e| e.present).count()
    }

    /// Line-oriented dump, one present slot per line:
    /// `bucket,slot,pid,vpn,ppn,perms,valid`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (b, s, e) in self.entries() {
            let _ = writeln!(
                out,
                "{b},{s},{},{},{},{},{}",
                e.pid, e.vpn, e.ppn, e.perms, e.valid as u8
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    pub ppn: Ppn,
    pub perms: Perms,
}

/// Fully associative translation cache with LRU replacement.
#[derive(Debug, Clone)]
pub struct Tlb {
    capacity: usize,
    entries: HashMap<(Pid, Vpn), (TlbEntry, u64)>,
    recency: BTreeMap<u64, (Pid, Vpn)>,
    clock: u64,
    hits: u64,
    misses: u64,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        Tlb {
            capacity,
            entries: HashMap::new(),
            recency: BTreeMap::new(),
            clock: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    fn touch(&mut self, key: (Pid, Vpn)) {
        self.clock += 1;
        if let Some((_, stamp)) = self.entries.get_mut(&key) {
            self.recency.remove(stamp);
            *stamp = self.clock;
            self.recency.insert(self.clock, key);
        }
    }

    pub fn access(&mut self, pid: Pid, vpn: Vpn) -> Option<TlbEntry> {
        match self.entries.get(&(pid, vpn)).map(|(e, _)| *e) {
            Some(e) => {
                self.hits += 1;
                self.touch((pid, vpn));
                Some(e)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Non-mutating probe, does not count as an access.
    pub fn peek(&self, pid: Pid, vpn: Vpn) -> Option<TlbEntry> {
        self.entries.get(&(pid, vpn)).map(|(e, _)| *e)
    }

    pub fn fill(&mut self, pid: Pid, vpn: Vpn, ppn: Ppn, perms: Perms) {
        if self.capacity == 0 {
            return;
        }
        let key = (pid, vpn);
        if let Some((e, _)) = self.entries.get_mut(&key) {
            *e = TlbEntry { ppn, perms };
            self.touch(key);
            return;
        }
        if self.entries.len() >= self.capacity {
            if let Some((_, victim)) = self.recency.pop_first() {
                self.entries.remove(&victim);
            }
        }
        self.clock += 1;
        self.entries
            .insert(key, (TlbEntry { ppn, perms }, self.clock));
        self.recency.insert(self.clock, key);
    }

    pub fn invalidate(&mut self, pid: Pid, vpn: Vpn) {
        if let Some((_, stamp)) = self.entries.remove(&(pid, vpn)) {
            self.recency.remove(&stamp);
        }
    }

    pub fn flush(&mut self) {
        self.entries.clear();
        self.recency.clear();
    }

    pub fn cached(&self) -> impl Iterator<Item = ((Pid, Vpn), TlbEntry)> + '_ {
        self.entries.iter().map(|(k, (e, _))| (*k, *e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_table() -> HashPageTable {
        HashPageTable::new(TableGeometry {
            num_buckets: 16,
            slots_per_bucket: 4,
        })
    }

    /// Brute-force search for `n` vpns of `pid` landing in the same bucket.
    fn colliding_vpns(pid: Pid, buckets: usize, n: usize) -> (usize, Vec<Vpn>) {
        let target = hash_index(pid, 0, buckets);
        let vpns: Vec<Vpn> = (0..)
            .filter(|&v| hash_index(pid, v, buckets) == target)
            .take(n)
            .collect();
        (target, vpns)
    }

    #[test]
    fn hash_index_is_deterministic_and_in_range() {
        for vpn in 0..1000u64 {
            let a = hash_index(7, vpn, 13);
            assert_eq!(a, hash_index(7, vpn, 13));
            assert!(a < 13);
        }
        assert_eq!(hash_index(1, 0, 1), 0);
    }

    #[test]
    fn hash_index_matches_raw_lookup3() {
        let mut key = Vec::new();
        key.extend_from_slice(&5u32.to_le_bytes());
        key.extend_from_slice(&0x1234u64.to_le_bytes());
        let raw = hashlittle(&key, 0);
        assert_eq!(hash_index(5, 0x1234, 1000), (raw % 1000) as usize);
    }

    #[test]
    fn lookup_in_empty_table_misses_and_counts() {
        let t = small_table();
        assert_eq!(t.lookup(1, 1), None);
        assert_eq!(t.bucket_fetches(), 1);
    }

    #[test]
    fn insert_then_lookup() {
        let mut t = small_table();
        let e = PageTableEntry {
            pid: 3,
            vpn: 99,
            ppn: 12,
            perms: Perms::RW,
            valid: true,
            present: true,
        };
        t.insert(e).unwrap();
        assert_eq!(t.lookup(3, 99), Some(e));
    }

    #[test]
    fn lookups_charge_exactly_one_fetch_each() {
        let t = small_table();
        for v in 0..1000 {
            t.lookup(v as u32 % 5, v);
        }
        assert_eq!(t.bucket_fetches(), 1000);
    }

    #[test]
    fn full_bucket_overflows_and_is_unchanged() {
        let mut t = small_table();
        let (bucket, vpns) = colliding_vpns(9, 16, 5);
        for &v in &vpns[..4] {
            t.insert(PageTableEntry::unbacked(9, v, Perms::RW)).unwrap();
        }
        let before = t.dump();
        assert_eq!(
            t.insert(PageTableEntry::unbacked(9, vpns[4], Perms::RW)),
            Err(InsertError::Overflow { bucket })
        );
        assert_eq!(t.dump(), before);
    }

    #[test]
    fn duplicate_is_distinct_from_overflow() {
        let mut t = small_table();
        t.insert(PageTableEntry::unbacked(1, 1, Perms::R)).unwrap();
        assert_eq!(
            t.insert(PageTableEntry::unbacked(1, 1, Perms::R)),
            Err(InsertError::Duplicate { pid: 1, vpn: 1 })
        );
    }

    #[test]
    fn remove_semantics() {
        let mut t = small_table();
        assert_eq!(t.remove(1, 1), Err(NotFound { pid: 1, vpn: 1 }));
        let e = PageTableEntry::unbacked(1, 1, Perms::R);
        t.insert(e).unwrap();
        t.remove(1, 1).unwrap();
        assert_eq!(t.lookup(1, 1), None);
        t.insert(e).unwrap();
        t.remove(1, 1).unwrap();
        t.insert(e).unwrap();
    }

    #[test]
    fn remove_frees_slot_for_overflowing_insert() {
        let mut t = small_table();
        let (_, vpns) = colliding_vpns(2, 16, 5);
        for &v in &vpns[..4] {
            t.insert(PageTableEntry::unbacked(2, v, Perms::RW)).unwrap();
        }
        assert!(t
            .insert(PageTableEntry::unbacked(2, vpns[4], Perms::RW))
            .is_err());
        t.remove(2, vpns[1]).unwrap();
        t.insert(PageTableEntry::unbacked(2, vpns[4], Perms::RW))
            .unwrap();
    }

    #[test]
    fn dump_format() {
        let mut t = HashPageTable::new(TableGeometry {
            num_buckets: 1,
            slots_per_bucket: 2,
        });
        t.insert(PageTableEntry {
            pid: 4,
            vpn: 5,
            ppn: 6,
            perms: Perms::RW,
            valid: true,
            present: true,
        })
        .unwrap();
        assert_eq!(t.dump(), "0,0,4,5,6,rw,1\n");
    }

    #[test]
    fn sizing_is_independent_of_pids() {
        let g = TableGeometry::for_memory(1 << 30, 4 << 20, 8, 2);
        assert_eq!(g.total_slots(), 512);
        assert_eq!(g.num_buckets, 64);
        let mut t = HashPageTable::new(g);
        let bytes = t.table_bytes();
        for pid in 0..100 {
            let _ = t.insert(PageTableEntry::unbacked(pid, 1, Perms::R));
        }
        assert_eq!(t.table_bytes(), bytes);
    }

    #[test]
    fn tlb_empty_miss() {
        let mut tlb = Tlb::new(4);
        assert_eq!(tlb.access(1, 1), None);
    }

    #[test]
    fn tlb_lru_eviction() {
        let mut tlb = Tlb::new(2);
        tlb.fill(1, 0xA, 1, Perms::RW);
        tlb.fill(1, 0xB, 2, Perms::RW);
        assert!(tlb.access(1, 0xA).is_some());
        tlb.fill(1, 0xC, 3, Perms::RW);
        assert!(tlb.peek(1, 0xA).is_some());
        assert!(tlb.peek(1, 0xB).is_none());
        assert!(tlb.peek(1, 0xC).is_some());
    }

    #[test]
    fn tlb_invalidate() {
        let mut tlb = Tlb::new(2);
        tlb.fill(1, 1, 1, Perms::R);
        tlb.invalidate(1, 1);
        assert_eq!(tlb.access(1, 1), None);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u32, u64),
        Remove(u32, u64),
        Validate(u32, u64, u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u32..3, 0u64..40).prop_map(|(p, v)| Op::Insert(p, v)),
            (0u32..3, 0u64..40).prop_map(|(p, v)| Op::Remove(p, v)),
            (0u32..3, 0u64..40, 0u64..100).prop_map(|(p, v, f)| Op::Validate(p, v, f)),
        ]
    }

    proptest! {
        #[test]
        fn no_duplicates_and_tlb_coherent(ops in prop::collection::vec(op(), 1..200)) {
            let mut t = HashPageTable::new(TableGeometry { num_buckets: 8, slots_per_bucket: 4 });
            let mut tlb = Tlb::new(5);
            for op in ops {
                match op {
                    Op::Insert(p, v) => { let _ = t.insert(PageTableEntry::unbacked(p, v, Perms::RW)); }
                    Op::Remove(p, v) => { let _ = t.remove(p, v); tlb.invalidate(p, v); }
                    Op::Validate(p, v, ppn) => {
                        if let Some(mut e) = t.lookup(p, v) {
                            e.valid = true;
                            e.ppn = ppn;
                            t.update(e).unwrap();
                            tlb.fill(p, v, ppn, e.perms);
                        }
                    }
                }
                prop_assert!(tlb.len() <= tlb.capacity());
            }
            let mut keys = std::collections::HashSet::new();
            for (b, _, e) in t.entries() {
                prop_assert!(keys.insert(e.key()));
                prop_assert_eq!(b, t.bucket_of(e.pid, e.vpn));
                prop_assert!(e.present || !e.valid);
            }
            for ((p, v), te) in tlb.cached() {
                let e = t.lookup(p, v).expect("cached mapping must exist");
                prop_assert!(e.valid);
                prop_assert_eq!(e.ppn, te.ppn);
            }
        }
    }
}
