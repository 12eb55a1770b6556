//! Multi-node topology: one controller, memory nodes and compute-node
//! clients wired through the simulated network.
//!
//! Endpoint ids are fixed: the controller is node 0, memory nodes are
//! `1..=M` and clients follow.

pub mod controller;

#[cfg(test)]
mod tests;

use std::collections::VecDeque;

use crate::clib::{
    ClibConfig, Client, Completion, HandleState, Op, OpError, OpResult, Ticket, APP_TIMER,
};
use crate::fast_path::{Emit, MemoryNode, MnConfig};
use crate::netsim::{EndpointKind, Event, FaultPlan, Handler, Network};
use crate::types::{NodeId, Perms, Pid, SimTime, Va};
pub use controller::{Controller, ControllerConfig, MigrateError, MigrationRecord, NodeLoad};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub memory_nodes: usize,
    pub compute_nodes: usize,
    pub controller: ControllerConfig,
    /// Register the key-value, multi-version and pointer-chase services on
    /// every memory node.
    pub services: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            memory_nodes: 1,
            compute_nodes: 1,
            controller: ControllerConfig::default(),
            services: true,
        }
    }
}

/// Everything needed to build a cluster.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimConfig {
    pub mn: MnConfig,
    pub net: FaultPlan,
    pub clib: ClibConfig,
    pub cluster: ClusterConfig,
}

/// Event surfaced to a [`Driver`].
#[derive(Debug, Clone, PartialEq, Eq)]
enum Notice {
    Completed(usize, Completion),
    Timer(usize, u64),
}

/// The endpoints; separate from the network so the network can borrow it as
/// its handler.
pub struct Nodes {
    controller: Controller,
    mns: Vec<MemoryNode>,
    cns: Vec<Client>,
    notices: VecDeque<Notice>,
    notify: bool,
}

impl Nodes {
    fn cn_index(&self, id: NodeId) -> Option<usize> {
        let base = 1 + self.mns.len();
        let i = (id.0 as usize).checked_sub(base)?;
        (i < self.cns.len()).then_some(i)
    }

    fn apply(net: &mut Network, src: NodeId, emits: Vec<Emit>) {
        for e in emits {
            match e {
                Emit::Send { dst, depart, bytes } => net
                    .send_at(src, dst, bytes, depart)
                    .expect("cluster endpoints are registered"),
                Emit::Timer { at, token } => net.schedule(src, at, token),
            }
        }
    }

    fn flush_client(&mut self, i: usize, net: &mut Network) {
        let c = &mut self.cns[i];
        let id = c.id();
        Self::apply(net, id, c.take_emits());
        let done = c.take_completions();
        if self.notify {
            self.notices
                .extend(done.into_iter().map(|d| Notice::Completed(i, d)));
        }
    }

    fn flush_controller(&mut self, net: &mut Network) {
        let id = self.controller.id();
        Self::apply(net, id, self.controller.take_emits());
    }
}

impl Handler for Nodes {
    fn handle(&mut self, now: SimTime, dst: NodeId, event: Event, net: &mut Network) {
        if dst == self.controller.id() {
            if let Event::Deliver(p) = event {
                self.controller.on_packet(now, p.src, &p.bytes);
            }
            self.flush_controller(net);
        } else if let Some(i) = self.cn_index(dst) {
            match event {
                Event::Deliver(p) => self.cns[i].on_packet(now, p.src, &p.bytes, p.corrupted),
                Event::Timer(t) if t & APP_TIMER == APP_TIMER && t & (1 << 62) == 0 => {
                    if self.notify {
                        self.notices.push_back(Notice::Timer(i, t & !APP_TIMER));
                    }
                }
                Event::Timer(t) => self.cns[i].on_timer(now, t),
            }
            self.flush_client(i, net);
        } else {
            let mn = &mut self.mns[dst.0 as usize - 1];
            let emits = match event {
                Event::Deliver(p) => mn.on_packet(now, p.src, &p.bytes, p.corrupted),
                Event::Timer(t) => mn.on_timer(now, t),
            };
            Self::apply(net, dst, emits);
        }
    }
}

/// Reacts to completions and application timers while the cluster runs.
pub trait Driver {
    fn completed(&mut self, cluster: &mut Cluster, cn: usize, completion: Completion);
    fn timer(&mut self, _cluster: &mut Cluster, _cn: usize, _token: u64) {}
    fn finished(&self) -> bool;
}

pub struct Cluster {
    net: Network,
    nodes: Nodes,
}

impl Cluster {
    pub fn new(cfg: &SimConfig) -> Self {
        let mut net = Network::new(cfg.net.clone());
        let controller_id = NodeId(0);
        net.register(controller_id, EndpointKind::Controller)
            .unwrap();
        let m = cfg.cluster.memory_nodes;
        let mut mns = Vec::with_capacity(m);
        for i in 0..m {
            let id = NodeId(1 + i as u16);
            net.register(id, EndpointKind::Memory).unwrap();
            let mut node = MemoryNode::new(id, controller_id, cfg.mn.clone());
            if cfg.cluster.services {
                crate::apps::install(&mut node, i as u16);
            }
            mns.push(node);
        }
        let mut cns = Vec::with_capacity(cfg.cluster.compute_nodes);
        for i in 0..cfg.cluster.compute_nodes {
            let id = NodeId((1 + m + i) as u16);
            net.register(id, EndpointKind::Client).unwrap();
            cns.push(Client::new(id, i as u16, controller_id, cfg.clib.clone()));
        }
        let controller = Controller::new(
            controller_id,
            mns.iter().map(MemoryNode::id).collect(),
            cns.iter().map(Client::id).collect(),
            cfg.cluster.controller.clone(),
        );
        Cluster {
            net,
            nodes: Nodes {
                controller,
                mns,
                cns,
                notices: VecDeque::new(),
                notify: false,
            },
        }
    }

    pub fn now(&self) -> SimTime {
        self.net.now()
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn controller(&self) -> &Controller {
        &self.nodes.controller
    }

    pub fn mns(&self) -> &[MemoryNode] {
        &self.nodes.mns
    }

    pub fn mn_ids(&self) -> Vec<NodeId> {
        self.nodes.mns.iter().map(MemoryNode::id).collect()
    }

    /// Memory node by endpoint id.
    pub fn mn(&self, id: NodeId) -> &MemoryNode {
        &self.nodes.mns[id.0 as usize - 1]
    }

    pub fn mn_mut(&mut self, id: NodeId) -> &mut MemoryNode {
        &mut self.nodes.mns[id.0 as usize - 1]
    }

    pub fn client(&self, cn: usize) -> &Client {
        &self.nodes.cns[cn]
    }

    pub fn clients(&self) -> &[Client] {
        &self.nodes.cns
    }

    /// Reads memory the way the owning node sees it, without simulating.
    pub fn peek(&self, pid: Pid, va: Va, len: usize) -> Option<Vec<u8>> {
        let owner = self
            .nodes
            .controller
            .owner(pid, crate::types::region_of(va))?;
        self.mn(owner).peek(pid, va, len)
    }

    pub fn submit(&mut self, cn: usize, pid: Pid, thread: u32, op: Op) -> Ticket {
        let now = self.net.now();
        let t = self.nodes.cns[cn].submit(now, pid, thread, op);
        self.nodes.flush_client(cn, &mut self.net);
        t
    }

    pub fn poll(&self, cn: usize, t: Ticket) -> Option<HandleState> {
        self.nodes.cns[cn].poll(t)
    }

    pub fn reap(&mut self, cn: usize, t: Ticket) -> Option<OpResult> {
        self.nodes.cns[cn].reap(t)
    }

    /// Runs the simulation until `t` finishes and returns its result.
    pub fn wait(&mut self, cn: usize, t: Ticket) -> OpResult {
        loop {
            if let Some(r) = self.nodes.cns[cn].reap(t) {
                return r;
            }
            assert!(
                self.net.step(&mut self.nodes),
                "simulation stalled with ticket {t:?} pending"
            );
            self.nodes.notices.clear();
        }
    }

    /// Blocks until every operation submitted by the thread has finished.
    pub fn release(&mut self, cn: usize, pid: Pid, thread: u32) {
        while !self.nodes.cns[cn].thread_idle(pid, thread) {
            assert!(
                self.net.step(&mut self.nodes),
                "simulation stalled in release"
            );
        }
    }

    /// Runs until no event is left.
    pub fn run_until_idle(&mut self) -> SimTime {
        self.net.run_until(&mut self.nodes, SimTime::MAX)
    }

    pub fn run_until(&mut self, deadline: SimTime) -> SimTime {
        self.net.run_until(&mut self.nodes, deadline)
    }

    /// Runs until the controller has no migration running or queued.
    pub fn settle_migrations(&mut self) {
        while self.nodes.controller.migrating() {
            assert!(
                self.net.step(&mut self.nodes),
                "simulation stalled during migration"
            );
        }
    }

    /// Schedules an application timer for client `cn`, surfaced to the
    /// driver as [`Driver::timer`].
    pub fn schedule(&mut self, cn: usize, at: SimTime, token: u64) {
        assert!(token < 1 << 62, "application tokens use the low 62 bits");
        let id = self.nodes.cns[cn].id();
        self.net.schedule(id, at, APP_TIMER | token);
    }

    /// Runs the simulation, handing completions and timers to `driver`,
    /// until it reports finished, the queue drains or `deadline` passes.
    pub fn drive(&mut self, driver: &mut dyn Driver, deadline: SimTime) -> SimTime {
        self.nodes.notify = true;
        loop {
            while let Some(n) = self.nodes.notices.pop_front() {
                match n {
                    Notice::Completed(cn, c) => driver.completed(self, cn, c),
                    Notice::Timer(cn, t) => driver.timer(self, cn, t),
                }
            }
            if driver.finished() || self.net.next_event_time().is_none_or(|t| t > deadline) {
                break;
            }
            self.net.step(&mut self.nodes);
        }
        self.nodes.notify = false;
        self.net.now()
    }

    pub fn migrate(&mut self, pid: Pid, region: u64, dst: NodeId) -> Result<(), MigrateError> {
        let now = self.net.now();
        self.nodes.controller.migrate(now, pid, region, dst)?;
        self.nodes.flush_controller(&mut self.net);
        Ok(())
    }

    // Synchronous conveniences for thread 0.

    pub fn alloc(&mut self, cn: usize, pid: Pid, size: u64) -> Result<Va, OpError> {
        let t = self.submit(
            cn,
            pid,
            0,
            Op::Alloc {
                size,
                perms: Perms::RW,
            },
        );
        self.wait(cn, t)
            .map(|d| u64::from_be_bytes(d[..8].try_into().unwrap()))
    }

    pub fn free(&mut self, cn: usize, pid: Pid, va: Va, size: u64) -> Result<(), OpError> {
        let t = self.submit(cn, pid, 0, Op::Free { va, size });
        self.wait(cn, t).map(drop)
    }

    pub fn read(&mut self, cn: usize, pid: Pid, va: Va, len: u32) -> Result<Vec<u8>, OpError> {
        let t = self.submit(cn, pid, 0, Op::Read { va, len });
        self.wait(cn, t)
    }

    pub fn write(&mut self, cn: usize, pid: Pid, va: Va, data: &[u8]) -> Result<(), OpError> {
        let t = self.submit(
            cn,
            pid,
            0,
            Op::Write {
                va,
                data: data.to_vec(),
            },
        );
        self.wait(cn, t).map(drop)
    }

    pub fn fetch_add(&mut self, cn: usize, pid: Pid, va: Va, delta: u64) -> Result<u64, OpError> {
        let t = self.submit(cn, pid, 0, Op::FetchAdd { va, delta });
        self.wait(cn, t)
            .map(|d| u64::from_be_bytes(d[..8].try_into().unwrap()))
    }
}
