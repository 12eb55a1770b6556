use super::*;
use crate::clib::split;
use crate::types::{region_of, PageSize, REGION_SIZE};
use crate::wire::Status;

const A: Pid = 1;
const B: Pid = 2;
const C: Pid = 3;
const PAGE: u64 = 4096;

/// Two memory nodes of `pages` 4 KB frames each.
fn pair(pages: u64) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.mn.page_size = PageSize::Size4K;
    cfg.mn.physical_bytes = pages * PAGE;
    cfg.mn.tlb_entries = 64;
    cfg.clib.page_size = PageSize::Size4K;
    cfg.cluster.memory_nodes = 2;
    cfg.cluster.services = false;
    cfg
}

fn touch(c: &mut Cluster, pid: Pid, va: Va, pages: u64) {
    for i in 0..pages {
        c.write(0, pid, va + i * PAGE, &(i as u32).to_le_bytes())
            .unwrap();
    }
}

/// Nodes holding any allocation of `(pid, region)`.
fn holders(c: &Cluster, pid: Pid, region: u64) -> Vec<NodeId> {
    c.mns()
        .iter()
        .filter(|m| {
            let shift = m.core().meta().page_bytes().trailing_zeros();
            let lo = (region * REGION_SIZE) >> shift;
            let hi = ((region + 1) * REGION_SIZE) >> shift;
            !m.core().meta().vmas_in(pid, lo..hi).is_empty()
        })
        .map(|m| m.id())
        .collect()
}

#[test]
fn endpoints_are_numbered_controller_first() {
    let mut cfg = pair(1024);
    cfg.cluster.compute_nodes = 3;
    let c = Cluster::new(&cfg);
    assert_eq!(c.controller().id(), NodeId(0));
    assert_eq!(c.mn_ids(), vec![NodeId(1), NodeId(2)]);
    let cns: Vec<NodeId> = c.clients().iter().map(|cl| cl.id()).collect();
    assert_eq!(cns, vec![NodeId(3), NodeId(4), NodeId(5)]);
}

#[test]
fn request_across_a_region_boundary_reaches_both_owners() {
    let mut cfg = SimConfig::default();
    cfg.mn.physical_bytes = 8 << 30;
    cfg.cluster.memory_nodes = 2;
    cfg.cluster.services = false;
    let mut c = Cluster::new(&cfg);
    // Page 0 stays unmapped, so this fills region 0 up to its last byte.
    let low = c.alloc(0, A, REGION_SIZE - (4 << 20)).unwrap();
    assert_eq!(low, 4 << 20);
    let high = c.alloc(0, A, 4 << 20).unwrap();
    assert_eq!(high, REGION_SIZE);
    let (o0, o1) = (
        c.controller().owner(A, 0).unwrap(),
        c.controller().owner(A, 1).unwrap(),
    );
    assert_ne!(o0, o1);

    let data: Vec<u8> = (0..200).map(|i| i as u8).collect();
    let va = REGION_SIZE - 100;
    assert_eq!(split(va, 200), vec![(va, 100), (REGION_SIZE, 100)]);
    c.write(0, A, va, &data).unwrap();
    assert_eq!(c.read(0, A, va, 200).unwrap(), data);
    assert_eq!(c.mn(o0).peek(A, va, 100).unwrap(), &data[..100]);
    assert_eq!(c.mn(o1).peek(A, REGION_SIZE, 100).unwrap(), &data[100..]);
}

#[test]
fn migration_preserves_bytes() {
    let mut c = Cluster::new(&pair(4096));
    let va = c.alloc(0, A, 64 * PAGE).unwrap();
    let pattern: Vec<u8> = (0..40 * PAGE).map(|i| (i * 7 % 253) as u8).collect();
    for chunk in 0..40 {
        let off = chunk * PAGE;
        c.write(
            0,
            A,
            va + off,
            &pattern[off as usize..(off + PAGE) as usize],
        )
        .unwrap();
    }
    let before = c.peek(A, va, 64 * PAGE as usize).unwrap();
    let src = c.controller().owner(A, 0).unwrap();
    let dst = c.mn_ids().into_iter().find(|&m| m != src).unwrap();
    c.migrate(A, 0, dst).unwrap();
    c.settle_migrations();
    assert_eq!(c.controller().owner(A, 0), Some(dst));
    assert_eq!(c.controller().history()[0].status, Status::Ok);
    c.run_until_idle();
    assert_eq!(holders(&c, A, 0), vec![dst]);
    assert!(c.mn(dst).peek(A, va, 64 * PAGE as usize).unwrap() == before);
    assert_eq!(
        c.read(0, A, va + 5 * PAGE, 16).unwrap(),
        &pattern[5 * PAGE as usize..][..16]
    );
    // The moved region is still writable at its new home.
    c.write(0, A, va + 50 * PAGE, b"after").unwrap();
    assert_eq!(c.mn(dst).peek(A, va + 50 * PAGE, 5).unwrap(), b"after");
}

#[test]
fn requests_issued_during_migration_complete() {
    let mut cfg = pair(4096);
    cfg.cluster.compute_nodes = 2;
    let mut c = Cluster::new(&cfg);
    let va = c.alloc(0, A, 32 * PAGE).unwrap();
    touch(&mut c, A, va, 32);
    c.read(1, A, va, 1).unwrap();
    let src = c.controller().owner(A, 0).unwrap();
    let dst = c.mn_ids().into_iter().find(|&m| m != src).unwrap();

    let mut tickets = Vec::new();
    for i in 0..32u64 {
        let cn = (i % 2) as usize;
        tickets.push((
            cn,
            c.submit(
                cn,
                A,
                0,
                Op::Write {
                    va: va + i * PAGE,
                    data: vec![i as u8 + 1; 64],
                },
            ),
        ));
    }
    c.migrate(A, 0, dst).unwrap();
    for i in 0..32u64 {
        let cn = (i % 2) as usize;
        tickets.push((
            cn,
            c.submit(
                cn,
                A,
                1,
                Op::Read {
                    va: va + i * PAGE + 1000,
                    len: 8,
                },
            ),
        ));
    }
    for (cn, t) in tickets {
        assert!(c.wait(cn, t).is_ok());
    }
    c.settle_migrations();
    assert_eq!(c.controller().owner(A, 0), Some(dst));
    for i in 0..32u64 {
        assert_eq!(
            c.read(0, A, va + i * PAGE, 64).unwrap(),
            vec![i as u8 + 1; 64]
        );
    }
}

#[test]
fn empty_region_migrates() {
    let mut c = Cluster::new(&pair(1024));
    let va = c.alloc(0, A, 8 * PAGE).unwrap();
    let src = c.controller().owner(A, 0).unwrap();
    let dst = c.mn_ids().into_iter().find(|&m| m != src).unwrap();
    c.migrate(A, 0, dst).unwrap();
    c.settle_migrations();
    c.run_until_idle();
    assert_eq!(holders(&c, A, 0), vec![dst]);
    assert_eq!(c.read(0, A, va, 16).unwrap(), vec![0; 16]);
}

#[test]
fn migration_to_the_current_owner_is_rejected() {
    let mut c = Cluster::new(&pair(1024));
    c.alloc(0, A, PAGE).unwrap();
    let src = c.controller().owner(A, 0).unwrap();
    assert_eq!(c.migrate(A, 0, src), Err(MigrateError::SameNode(A, 0, src)));
    assert_eq!(c.migrate(A, 9, src), Err(MigrateError::Unassigned(A, 9)));
}

#[test]
fn migration_into_a_full_node_aborts() {
    let mut cfg = pair(1024);
    cfg.cluster.controller.auto_migrate = false;
    let mut c = Cluster::new(&cfg);
    let a = c.alloc(0, A, 300 * PAGE).unwrap();
    let b = c.alloc(0, B, 900 * PAGE).unwrap();
    let (src, dst) = (
        c.controller().owner(A, 0).unwrap(),
        c.controller().owner(B, 0).unwrap(),
    );
    assert_ne!(src, dst);
    touch(&mut c, A, a, 300);
    touch(&mut c, B, b, 900);
    c.migrate(A, 0, dst).unwrap();
    c.settle_migrations();
    c.run_until_idle();
    let rec = c.controller().history()[0];
    assert_ne!(rec.status, Status::Ok);
    assert_eq!(c.controller().owner(A, 0), Some(src));
    assert_eq!(holders(&c, A, 0), vec![src]);
    assert_eq!(
        c.read(0, A, a + 299 * PAGE, 4).unwrap(),
        299u32.to_le_bytes()
    );
    assert_eq!(
        c.read(0, B, b + 899 * PAGE, 4).unwrap(),
        899u32.to_le_bytes()
    );
}

#[test]
fn pressure_moves_the_coldest_region() {
    let mut c = Cluster::new(&pair(1024));
    let a = c.alloc(0, A, 300 * PAGE).unwrap();
    let b = c.alloc(0, B, PAGE).unwrap();
    let cc = c.alloc(0, C, 600 * PAGE).unwrap();
    let hot = c.controller().owner(A, 0).unwrap();
    assert_eq!(c.controller().owner(C, 0), Some(hot));
    assert_ne!(c.controller().owner(B, 0), Some(hot));
    touch(&mut c, A, a, 300);
    touch(&mut c, B, b, 1);
    touch(&mut c, C, cc, 600);
    c.run_until_idle();
    c.settle_migrations();
    c.run_until_idle();

    let history = c.controller().history();
    assert!(!history.is_empty());
    let first = history[0];
    assert!(first.automatic);
    assert_eq!(
        (first.pid, first.region, first.src, first.status),
        (A, 0, hot, Status::Ok)
    );
    assert_ne!(c.controller().owner(A, 0), Some(hot));
    assert_eq!(c.controller().owner(C, 0), Some(hot));
    for i in [0, 150, 299] {
        assert_eq!(
            c.read(0, A, a + i * PAGE, 4).unwrap(),
            (i as u32).to_le_bytes()
        );
    }
}

#[test]
fn every_region_has_exactly_one_holder() {
    let mut cfg = pair(2048);
    cfg.cluster.memory_nodes = 3;
    let mut c = Cluster::new(&cfg);
    let mut vas = Vec::new();
    for pid in 1..=6 {
        let va = c.alloc(0, pid, 20 * PAGE).unwrap();
        touch(&mut c, pid, va, 20);
        vas.push((pid, va));
    }
    let ids = c.mn_ids();
    for (k, &(pid, _)) in vas.iter().enumerate() {
        let owner = c.controller().owner(pid, 0).unwrap();
        let dst = ids[(ids.iter().position(|&m| m == owner).unwrap() + 1 + k % 2) % ids.len()];
        c.migrate(pid, 0, dst).unwrap();
    }
    c.settle_migrations();
    c.run_until_idle();
    for &(pid, va) in &vas {
        let owner = c.controller().owner(pid, 0).unwrap();
        assert_eq!(holders(&c, pid, 0), vec![owner]);
        assert_eq!(region_of(va), 0);
        assert_eq!(
            c.read(0, pid, va + 19 * PAGE, 4).unwrap(),
            19u32.to_le_bytes()
        );
    }
}
