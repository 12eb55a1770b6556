//! Global controller: region placement, occupancy tracking and migration.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::fast_path::Emit;
use crate::types::{NodeId, Pid, SimTime, REGION_SIZE};
use crate::wire::{codec, Header, Message, Opcode, Status, HEADER_LEN, RESPONSE_BIT};

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Occupancy above which a node sheds its coldest region.
    pub pressure_threshold: f64,
    /// Nodes at or above this occupancy receive no new regions.
    pub hard_capacity: f64,
    pub auto_migrate: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            pressure_threshold: 0.85,
            hard_capacity: 0.98,
            auto_migrate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MigrateError {
    #[error("region ({0}, {1}) has no owner")]
    Unassigned(Pid, u64),
    #[error("region ({0}, {1}) already lives on node {2}")]
    SameNode(Pid, u64, NodeId),
    #[error("node {0} is not a memory node")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionLoad {
    pub pid: Pid,
    pub region: u64,
    pub last_access: SimTime,
    pub pages: u64,
}

/// Last occupancy report from one memory node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeLoad {
    pub used: u64,
    pub total: u64,
    pub regions: Vec<RegionLoad>,
}

impl NodeLoad {
    pub fn occupancy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.used as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Holding { acks: usize },
    Moving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Migration {
    pid: Pid,
    region: u64,
    src: NodeId,
    dst: NodeId,
    phase: Phase,
    started: SimTime,
}

/// Outcome of one finished migration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationRecord {
    pub pid: Pid,
    pub region: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub started: SimTime,
    pub finished: SimTime,
    pub status: Status,
    pub automatic: bool,
}

pub struct Controller {
    id: NodeId,
    mns: Vec<NodeId>,
    cns: Vec<NodeId>,
    cfg: ControllerConfig,
    owners: BTreeMap<(Pid, u64), NodeId>,
    loads: BTreeMap<NodeId, NodeLoad>,
    active: Option<(Migration, bool)>,
    queue: VecDeque<(Pid, u64, NodeId, bool)>,
    deferred: Vec<(NodeId, Pid, u64)>,
    history: Vec<MigrationRecord>,
    out: Vec<Emit>,
}

impl Controller {
    pub fn new(id: NodeId, mns: Vec<NodeId>, cns: Vec<NodeId>, cfg: ControllerConfig) -> Self {
        let loads = mns.iter().map(|&m| (m, NodeLoad::default())).collect();
        Controller {
            id,
            mns,
            cns,
            cfg,
            owners: BTreeMap::new(),
            loads,
            active: None,
            queue: VecDeque::new(),
            deferred: Vec::new(),
            history: Vec::new(),
            out: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn owner(&self, pid: Pid, region: u64) -> Option<NodeId> {
        self.owners.get(&(pid, region)).copied()
    }

    pub fn owners(&self) -> &BTreeMap<(Pid, u64), NodeId> {
        &self.owners
    }

    pub fn load(&self, node: NodeId) -> Option<&NodeLoad> {
        self.loads.get(&node)
    }

    pub fn history(&self) -> &[MigrationRecord] {
        &self.history
    }

    /// True while a migration is running or queued.
    pub fn migrating(&self) -> bool {
        self.active.is_some() || !self.queue.is_empty()
    }

    pub fn take_emits(&mut self) -> Vec<Emit> {
        std::mem::take(&mut self.out)
    }

    fn regions_on(&self, node: NodeId) -> usize {
        self.owners.values().filter(|&&o| o == node).count()
    }

    /// Picks the least occupied node below hard capacity. Ties go to the
    /// node holding fewer regions, then to the lowest id.
    pub fn choose(&self) -> Option<NodeId> {
        self.mns
            .iter()
            .filter_map(|&m| {
                let occ = self.loads.get(&m).map_or(0.0, NodeLoad::occupancy);
                (occ < self.cfg.hard_capacity).then_some((occ, self.regions_on(m), m))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
            .map(|(_, _, m)| m)
    }

    /// Returns the owner of `(pid, region)`, placing it first if needed.
    pub fn assign(&mut self, pid: Pid, region: u64) -> Result<NodeId, Status> {
        if let Some(&o) = self.owners.get(&(pid, region)) {
            return Ok(o);
        }
        let node = self.choose().ok_or(Status::OutOfMemory)?;
        self.owners.insert((pid, region), node);
        Ok(node)
    }

    /// Moves `(pid, region)` to `dst`, queued behind any running migration.
    pub fn migrate(
        &mut self,
        now: SimTime,
        pid: Pid,
        region: u64,
        dst: NodeId,
    ) -> Result<(), MigrateError> {
        if !self.mns.contains(&dst) {
            return Err(MigrateError::UnknownNode(dst));
        }
        match self.owners.get(&(pid, region)) {
            None => return Err(MigrateError::Unassigned(pid, region)),
            Some(&o) if o == dst => return Err(MigrateError::SameNode(pid, region, dst)),
            Some(_) => {}
        }
        self.queue.push_back((pid, region, dst, false));
        self.start_next(now);
        Ok(())
    }

    fn start_next(&mut self, now: SimTime) {
        while self.active.is_none() {
            let Some((pid, region, dst, auto)) = self.queue.pop_front() else {
                return;
            };
            let Some(&src) = self.owners.get(&(pid, region)) else {
                continue;
            };
            if src == dst {
                continue;
            }
            self.active = Some((
                Migration {
                    pid,
                    region,
                    src,
                    dst,
                    phase: Phase::Holding { acks: 0 },
                    started: now,
                },
                auto,
            ));
            for cn in self.cns.clone() {
                self.send(cn, Opcode::Hold, pid, region, None, now);
            }
            self.maybe_move(now);
        }
    }

    fn maybe_move(&mut self, now: SimTime) {
        let Some((m, _)) = self.active.as_mut() else {
            return;
        };
        if m.phase
            == (Phase::Holding {
                acks: self.cns.len(),
            })
        {
            m.phase = Phase::Moving;
            let m = *m;
            self.send(m.src, Opcode::Migrate, m.pid, m.region, Some(m.dst.0), now);
        }
    }

    fn send(
        &mut self,
        dst: NodeId,
        op: Opcode,
        pid: Pid,
        region: u64,
        extra: Option<u16>,
        now: SimTime,
    ) {
        let h = Header::request(op, pid, 0, region * REGION_SIZE, 0);
        let mut p = Vec::new();
        codec::put_u32(&mut p, pid);
        codec::put_u64(&mut p, region);
        if let Some(x) = extra {
            codec::put_u16(&mut p, x);
        }
        self.out.push(Emit::Send {
            dst,
            depart: now,
            bytes: Message::request(h, p).encode(),
        });
    }

    fn reply_assign(&mut self, now: SimTime, cn: NodeId, pid: Pid, region: u64) {
        let result = self.assign(pid, region);
        let mut h = Header::request(Opcode::Assign, pid, 0, region * REGION_SIZE, 0);
        h.opcode |= RESPONSE_BIT;
        let mut p = Vec::new();
        codec::put_u32(&mut p, pid);
        codec::put_u64(&mut p, region);
        let status = match result {
            Ok(node) => {
                codec::put_u16(&mut p, node.0);
                Status::Ok
            }
            Err(s) => s,
        };
        self.out.push(Emit::Send {
            dst: cn,
            depart: now,
            bytes: Message::response(h, status, p).encode(),
        });
    }

    pub fn on_packet(&mut self, now: SimTime, src: NodeId, bytes: &[u8]) {
        let Ok(h) = Header::parse(bytes) else {
            return;
        };
        let mut r = codec::Reader::new(&bytes[HEADER_LEN..]);
        match h.op() {
            Opcode::OccupancyReport => {
                if let Some(load) = parse_load(&mut r) {
                    self.loads.insert(src, load);
                    self.check_pressure(now, src);
                }
            }
            Opcode::Assign => {
                let (Some(pid), Some(region)) = (r.u32(), r.u64()) else {
                    return;
                };
                let busy = self
                    .active
                    .is_some_and(|(m, _)| (m.pid, m.region) == (pid, region));
                if busy {
                    self.deferred.push((src, pid, region));
                } else {
                    self.reply_assign(now, src, pid, region);
                }
            }
            Opcode::HoldAck => {
                let (Some(pid), Some(region)) = (r.u32(), r.u64()) else {
                    return;
                };
                if let Some((m, _)) = self.active.as_mut() {
                    if let Phase::Holding { acks } = &mut m.phase {
                        if (m.pid, m.region) == (pid, region) {
                            *acks += 1;
                        }
                    }
                }
                self.maybe_move(now);
            }
            Opcode::MigrateDone => {
                let (Some(pid), Some(region), Some(code)) = (r.u32(), r.u64(), r.u8()) else {
                    return;
                };
                let Some((m, auto)) = self.active else {
                    return;
                };
                if (m.pid, m.region, m.phase) != (pid, region, Phase::Moving) {
                    return;
                }
                let status = Status::from_code(code);
                let owner = if status == Status::Ok {
                    self.owners.insert((pid, region), m.dst);
                    self.send(m.src, Opcode::DropRegion, pid, region, None, now);
                    m.dst
                } else {
                    m.src
                };
                for cn in self.cns.clone() {
                    self.send(cn, Opcode::Resume, pid, region, Some(owner.0), now);
                }
                self.history.push(MigrationRecord {
                    pid,
                    region,
                    src: m.src,
                    dst: m.dst,
                    started: m.started,
                    finished: now,
                    status,
                    automatic: auto,
                });
                self.active = None;
                let waiting: Vec<_> = self
                    .deferred
                    .iter()
                    .copied()
                    .filter(|d| (d.1, d.2) == (pid, region))
                    .collect();
                self.deferred.retain(|d| (d.1, d.2) != (pid, region));
                for (cn, pid, region) in waiting {
                    self.reply_assign(now, cn, pid, region);
                }
                self.start_next(now);
            }
            _ => {}
        }
    }

    /// Sheds the least recently accessed region of an overloaded node.
    fn check_pressure(&mut self, now: SimTime, node: NodeId) {
        if !self.cfg.auto_migrate || self.migrating() {
            return;
        }
        let load = &self.loads[&node];
        if load.occupancy() <= self.cfg.pressure_threshold {
            return;
        }
        let victim = load
            .regions
            .iter()
            .filter(|r| r.pages > 0 && self.owners.get(&(r.pid, r.region)) == Some(&node))
            .min_by_key(|r| (r.last_access, r.pid, r.region))
            .copied();
        let Some(victim) = victim else {
            return;
        };
        let dst = self
            .mns
            .iter()
            .filter(|&&m| m != node)
            .filter_map(|&m| {
                let l = self.loads.get(&m)?;
                let after = (l.used + victim.pages) as f64 / l.total.max(1) as f64;
                (after <= self.cfg.pressure_threshold).then_some((l.occupancy(), m))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, m)| m);
        if let Some(dst) = dst {
            self.queue.push_back((victim.pid, victim.region, dst, true));
            self.start_next(now);
        }
    }
}

fn parse_load(r: &mut codec::Reader<'_>) -> Option<NodeLoad> {
    let used = r.u64()?;
    let total = r.u64()?;
    let n = r.u32()?;
    let mut regions = Vec::with_capacity(n as usize);
    for _ in 0..n {
        regions.push(RegionLoad {
            pid: r.u32()?,
            region: r.u64()?,
            last_access: r.u64()?,
            pages: r.u64()?,
        });
    }
    Some(NodeLoad {
        used,
        total,
        regions,
    })
}
