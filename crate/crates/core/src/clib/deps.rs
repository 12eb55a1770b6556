//! Page-granularity hazard tracking for client admission.
//!
//! Requests of one `(pid, thread)` that touch a common page are ordered
//! unless both only read. A free conflicts with every thread of its process.
//! Fences and locks are ordering points for their thread.

use std::collections::{HashMap, HashSet};

use crate::types::Pid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hazard {
    Read,
    Write,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Barrier {
    None,
    /// Waits for earlier requests of the thread to be sent; later requests
    /// wait for it to complete.
    Order,
    /// Like `Order`, and also waits for earlier requests to complete.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    pub pid: Pid,
    pub thread: u32,
    pub hazard: Hazard,
    pub pages: Vec<u64>,
    pub barrier: Barrier,
}

fn conflicts(a: (u32, Hazard), b: (u32, Hazard)) -> bool {
    match (a.1, b.1) {
        (Hazard::Free, _) | (_, Hazard::Free) => true,
        (Hazard::Read, Hazard::Read) => false,
        _ => a.0 == b.0,
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct ThreadCount {
    inflight: usize,
    barriers: usize,
}

/// Footprints of admitted, not yet completed requests.
#[derive(Debug, Default)]
pub struct Hazards {
    pages: HashMap<(Pid, u64), Vec<(u32, Hazard)>>,
    threads: HashMap<(Pid, u32), ThreadCount>,
}

/// Footprints of requests passed over earlier in the current admission scan.
#[derive(Debug, Default)]
pub struct Scan {
    pages: HashMap<(Pid, u64), Vec<(u32, Hazard)>>,
    skipped: HashSet<(Pid, u32)>,
    barriers: HashSet<(Pid, u32)>,
}

impl Scan {
    pub fn defer(&mut self, fp: &Footprint) {
        let t = (fp.pid, fp.thread);
        self.skipped.insert(t);
        if fp.barrier != Barrier::None {
            self.barriers.insert(t);
        }
        for &p in &fp.pages {
            self.pages
                .entry((fp.pid, p))
                .or_default()
                .push((fp.thread, fp.hazard));
        }
    }
}

impl Hazards {
    pub fn admissible(&self, fp: &Footprint, scan: &Scan) -> bool {
        let t = (fp.pid, fp.thread);
        let counts = self.threads.get(&t).copied().unwrap_or_default();
        if counts.barriers > 0 || scan.barriers.contains(&t) {
            return false;
        }
        if fp.barrier != Barrier::None && scan.skipped.contains(&t) {
            return false;
        }
        if fp.barrier == Barrier::Full && counts.inflight > 0 {
            return false;
        }
        let me = (fp.thread, fp.hazard);
        !fp.pages.iter().any(|&p| {
            let key = (fp.pid, p);
            [self.pages.get(&key), scan.pages.get(&key)]
                .into_iter()
                .flatten()
                .flatten()
                .any(|&other| conflicts(me, other))
        })
    }

    pub fn add(&mut self, fp: &Footprint) {
        let c = self.threads.entry((fp.pid, fp.thread)).or_default();
        c.inflight += 1;
        if fp.barrier != Barrier::None {
            c.barriers += 1;
        }
        for &p in &fp.pages {
            self.pages
                .entry((fp.pid, p))
                .or_default()
                .push((fp.thread, fp.hazard));
        }
    }

    pub fn remove(&mut self, fp: &Footprint) {
        let t = (fp.pid, fp.thread);
        if let Some(c) = self.threads.get_mut(&t) {
            c.inflight -= 1;
            if fp.barrier != Barrier::None {
                c.barriers -= 1;
            }
            if c.inflight == 0 {
                self.threads.remove(&t);
            }
        }
        for &p in &fp.pages {
            let key = (fp.pid, p);
            if let Some(v) = self.pages.get_mut(&key) {
                if let Some(i) = v.iter().position(|&e| e == (fp.thread, fp.hazard)) {
                    v.swap_remove(i);
                }
                if v.is_empty() {
                    self.pages.remove(&key);
                }
            }
        }
    }

    pub fn thread_inflight(&self, pid: Pid, thread: u32) -> usize {
        self.threads.get(&(pid, thread)).map_or(0, |c| c.inflight)
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty() && self.threads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fp(thread: u32, hazard: Hazard, pages: &[u64]) -> Footprint {
        Footprint {
            pid: 1,
            thread,
            hazard,
            pages: pages.to_vec(),
            barrier: Barrier::None,
        }
    }

    fn admit_against(inflight: &Footprint, new: &Footprint) -> bool {
        let mut h = Hazards::default();
        h.add(inflight);
        h.admissible(new, &Scan::default())
    }

    #[test]
    fn read_read_same_page_admits() {
        assert!(admit_against(
            &fp(0, Hazard::Read, &[3]),
            &fp(0, Hazard::Read, &[3])
        ));
    }

    #[test]
    fn waw_raw_war_hold() {
        for (a, b) in [
            (Hazard::Write, Hazard::Write),
            (Hazard::Write, Hazard::Read),
            (Hazard::Read, Hazard::Write),
        ] {
            assert!(!admit_against(&fp(0, a, &[3]), &fp(0, b, &[3])));
        }
    }

    #[test]
    fn different_pages_admit() {
        assert!(admit_against(
            &fp(0, Hazard::Write, &[3]),
            &fp(0, Hazard::Write, &[4])
        ));
    }

    #[test]
    fn other_threads_are_independent_except_free() {
        assert!(admit_against(
            &fp(0, Hazard::Write, &[3]),
            &fp(1, Hazard::Write, &[3])
        ));
        assert!(!admit_against(
            &fp(0, Hazard::Free, &[3]),
            &fp(1, Hazard::Read, &[3])
        ));
        assert!(!admit_against(
            &fp(1, Hazard::Read, &[3]),
            &fp(0, Hazard::Free, &[3])
        ));
    }

    #[test]
    fn earlier_deferred_request_blocks_later_conflict() {
        let h = Hazards::default();
        let mut scan = Scan::default();
        scan.defer(&fp(0, Hazard::Write, &[3]));
        assert!(!h.admissible(&fp(0, Hazard::Read, &[3]), &scan));
        assert!(h.admissible(&fp(0, Hazard::Read, &[4]), &scan));
    }

    #[test]
    fn barriers_order_their_thread() {
        let mut h = Hazards::default();
        let mut fence = fp(0, Hazard::Read, &[]);
        fence.barrier = Barrier::Order;
        h.add(&fence);
        assert!(!h.admissible(&fp(0, Hazard::Read, &[9]), &Scan::default()));
        assert!(h.admissible(&fp(1, Hazard::Read, &[9]), &Scan::default()));
        h.remove(&fence);
        assert!(h.is_empty());

        h.add(&fp(0, Hazard::Write, &[1]));
        assert!(h.admissible(&fence, &Scan::default()));
        let mut unlock = fence.clone();
        unlock.barrier = Barrier::Full;
        assert!(!h.admissible(&unlock, &Scan::default()));
    }

    proptest! {
        /// Admitted requests never conflict with each other.
        #[test]
        fn inflight_set_is_conflict_free(
            ops in proptest::collection::vec((0u32..3, 0u8..3, proptest::collection::vec(0u64..6, 1..3), any::<bool>()), 1..80)
        ) {
            let mut h = Hazards::default();
            let mut inflight: Vec<Footprint> = Vec::new();
            for (thread, kind, pages, complete_one) in ops {
                if complete_one && !inflight.is_empty() {
                    let done = inflight.remove(0);
                    h.remove(&done);
                }
                let hazard = [Hazard::Read, Hazard::Write, Hazard::Free][kind as usize];
                let new = fp(thread, hazard, &pages);
                if h.admissible(&new, &Scan::default()) {
                    for other in &inflight {
                        for p in &new.pages {
                            if other.pages.contains(p) {
                                prop_assert!(!conflicts((new.thread, new.hazard), (other.thread, other.hazard)));
                            }
                        }
                    }
                    h.add(&new);
                    inflight.push(new);
                }
            }
            for f in inflight { h.remove(&f); }
            prop_assert!(h.is_empty());
        }
    }
}
