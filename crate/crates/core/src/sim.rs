//! Deterministic discrete-event loop over a fixed topology.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{self, Disposition, Effect, Kernel, KernelOutcome, MpLibrary, NodeCtx, Signal, SoftState};
use crate::mp::{ClassicalNet, EntIdAllocator, LinkConfig, SimRng};
use crate::state::{ClassicalForwardingTable, Hints, InternalState, StateError};
use crate::trace::{Trace, TraceRecord};
use crate::types::{EntId, EntanglementResource, MetaHeader, QuantumAddress, QuantumPacket, ServiceIntent};

pub type HeaderId = u64;

/// Lamport receive rule.
pub fn lamport_merge(local: u64, received: u64) -> u64 {
    local.max(received) + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineParams {
    pub max_retries: u32,
    /// Cap on GEN attempts inside one link preparation, successes included.
    pub max_attempts: u32,
    pub backoff: f64,
    pub decay_period: f64,
    pub max_events: u64,
    pub max_time: f64,
    pub signal_timeout: f64,
    pub qp_time: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            max_retries: 16,
            max_attempts: 256,
            backoff: 1e-3,
            decay_period: 1e-3,
            max_events: 1_000_000,
            max_time: 3600.0,
            signal_timeout: 1.0,
            qp_time: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("unknown node {0}")]
    UnknownNode(QuantumAddress),
    #[error("link {0}-{0} connects a node to itself")]
    SelfLink(QuantumAddress),
    #[error("duplicate link {0}-{1}")]
    DuplicateLink(QuantumAddress, QuantumAddress),
    #[error("prepared_by {0} is not an endpoint of its link")]
    ForeignPreparer(QuantumAddress),
    #[error("latency must be non-negative, got {0}")]
    NegativeLatency(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumLink {
    pub a: QuantumAddress,
    pub b: QuantumAddress,
    pub config: LinkConfig,
    #[serde(default)]
    pub prepared_by: Option<QuantumAddress>,
}

impl QuantumLink {
    /// Endpoint responsible for building the link; the first-listed one by default.
    pub fn preparer(&self) -> &QuantumAddress {
        self.prepared_by.as_ref().unwrap_or(&self.a)
    }
}

fn key(a: &QuantumAddress, b: &QuantumAddress) -> (QuantumAddress, QuantumAddress) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Nodes, quantum and classical links, and the static classical forwarding tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Topology {
    nodes: BTreeSet<QuantumAddress>,
    quantum: BTreeMap<(QuantumAddress, QuantumAddress), QuantumLink>,
    classical: BTreeMap<(QuantumAddress, QuantumAddress), f64>,
    routes: BTreeMap<QuantumAddress, ClassicalForwardingTable>,
}

impl Topology {
    pub fn new(nodes: impl IntoIterator<Item = QuantumAddress>) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &QuantumAddress> {
        self.nodes.iter()
    }

    pub fn contains(&self, node: &QuantumAddress) -> bool {
        self.nodes.contains(node)
    }

    fn check_pair(&self, a: &QuantumAddress, b: &QuantumAddress) -> Result<(), TopologyError> {
        for n in [a, b] {
            if !self.nodes.contains(n) {
                return Err(TopologyError::UnknownNode(n.clone()));
            }
        }
        if a == b {
            return Err(TopologyError::SelfLink(a.clone()));
        }
        Ok(())
    }

    pub fn add_quantum_link(
        &mut self,
        a: QuantumAddress,
        b: QuantumAddress,
        config: LinkConfig,
        prepared_by: Option<QuantumAddress>,
    ) -> Result<(), TopologyError> {
        self.check_pair(&a, &b)?;
        if let Some(p) = &prepared_by {
            if p != &a && p != &b {
                return Err(TopologyError::ForeignPreparer(p.clone()));
            }
        }
        let k = key(&a, &b);
        if self.quantum.contains_key(&k) {
            return Err(TopologyError::DuplicateLink(a, b));
        }
        self.quantum.insert(
            k,
            QuantumLink {
                a,
                b,
                config,
                prepared_by,
            },
        );
        Ok(())
    }

    pub fn add_classical_link(&mut self, a: QuantumAddress, b: QuantumAddress, latency: f64) -> Result<(), TopologyError> {
        self.check_pair(&a, &b)?;
        if !(latency >= 0.0) {
            return Err(TopologyError::NegativeLatency(latency));
        }
        let k = key(&a, &b);
        if self.classical.contains_key(&k) {
            return Err(TopologyError::DuplicateLink(a, b));
        }
        self.classical.insert(k, latency);
        Ok(())
    }

    pub fn quantum_link(&self, a: &QuantumAddress, b: &QuantumAddress) -> Option<&QuantumLink> {
        self.quantum.get(&key(a, b))
    }

    pub fn quantum_links(&self) -> impl Iterator<Item = &QuantumLink> {
        self.quantum.values()
    }

    pub fn classical_neighbors(&self, node: &QuantumAddress) -> Vec<QuantumAddress> {
        self.classical
            .keys()
            .filter_map(|(a, b)| {
                if a == node {
                    Some(b.clone())
                } else if b == node {
                    Some(a.clone())
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn set_routes(&mut self, node: QuantumAddress, table: ClassicalForwardingTable) -> Result<(), StateError> {
        let neighbors: BTreeSet<QuantumAddress> = self.classical_neighbors(&node).into_iter().collect();
        table.validate(&node, &neighbors)?;
        self.routes.insert(node, table);
        Ok(())
    }

    /// Fewest-hop routes over classical links (BFS, neighbors in address order).
    pub fn compute_routes(&mut self) {
        for src in self.nodes.clone() {
            let mut first_hop: BTreeMap<QuantumAddress, QuantumAddress> = BTreeMap::new();
            let mut seen = BTreeSet::from([src.clone()]);
            let mut queue = VecDeque::new();
            for n in self.classical_neighbors(&src) {
                seen.insert(n.clone());
                first_hop.insert(n.clone(), n.clone());
                queue.push_back(n);
            }
            while let Some(u) = queue.pop_front() {
                let via = first_hop[&u].clone();
                for n in self.classical_neighbors(&u) {
                    if seen.insert(n.clone()) {
                        first_hop.insert(n.clone(), via.clone());
                        queue.push_back(n);
                    }
                }
            }
            self.routes
                .insert(src, ClassicalForwardingTable { next_hop: first_hop });
        }
    }

    pub fn routes_for(&self, node: &QuantumAddress) -> ClassicalForwardingTable {
        self.routes.get(node).cloned().unwrap_or_default()
    }
}

impl ClassicalNet for Topology {
    fn neighbor_latency(&self, a: &QuantumAddress, b: &QuantumAddress) -> Option<f64> {
        self.classical.get(&key(a, b)).copied()
    }

    fn route_latency(&self, src: &QuantumAddress, dst: &QuantumAddress) -> Option<f64> {
        let mut cur = src.clone();
        let mut total = 0.0;
        for _ in 0..=self.nodes.len() {
            if &cur == dst {
                return Some(total);
            }
            let nh = self.routes.get(&cur)?.lookup(dst)?.clone();
            total += self.neighbor_latency(&cur, &nh)?;
            cur = nh;
        }
        None
    }
}

#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(QuantumAddress),
    #[error("invalid intent: {0}")]
    InvalidIntent(String),
    #[error("event limit reached after {events} events at t={at}")]
    LimitExceeded {
        events: u64,
        at: f64,
        /// Trace up to the point the limit hit.
        trace: Box<Trace>,
    },
    #[error(transparent)]
    State(#[from] StateError),
}

#[derive(Debug, Clone)]
enum EventKind {
    Activate {
        header: HeaderId,
        packet: QuantumPacket,
    },
    Packet {
        to: QuantumAddress,
        header: HeaderId,
        packet: QuantumPacket,
        lamport: u64,
    },
    Signal {
        src: QuantumAddress,
        dst: QuantumAddress,
        signal: Signal,
        lamport: u64,
    },
    Timer {
        node: QuantumAddress,
        header: HeaderId,
    },
    DecaySweep,
}

#[derive(Debug, Clone)]
struct Event {
    at: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so that BinaryHeap pops the earliest (at, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
pub struct NodeRuntime {
    pub state: InternalState,
    pub soft: SoftState,
    pub caps: MpLibrary,
    /// Node-local clock; MPs advance it past the event time.
    pub busy_until: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderReport {
    pub header: HeaderId,
    pub intent: ServiceIntent,
    pub submitted_at: f64,
    pub finished_at: Option<f64>,
    pub disposition: Option<Disposition>,
    pub stamps: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: Trace,
    pub headers: Vec<HeaderReport>,
    pub events: u64,
    pub end_time: f64,
}

pub struct Simulator {
    topo: Topology,
    params: EngineParams,
    kernel: Kernel,
    nodes: BTreeMap<QuantumAddress, NodeRuntime>,
    queue: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    rng: SimRng,
    ids: EntIdAllocator,
    trace: Trace,
    headers: BTreeMap<HeaderId, HeaderReport>,
    next_header: HeaderId,
    events: u64,
    sweep_pending: bool,
}

impl Simulator {
    pub fn new(topo: Topology, params: EngineParams, seed: u64, verbose: bool) -> Self {
        let nodes = topo
            .nodes()
            .map(|n| {
                (
                    n.clone(),
                    NodeRuntime {
                        state: InternalState::new(n.clone(), topo.routes_for(n), Hints::default()),
                        soft: SoftState::default(),
                        caps: MpLibrary::default(),
                        busy_until: 0.0,
                    },
                )
            })
            .collect();
        Self {
            topo,
            params,
            kernel: Kernel::default(),
            nodes,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            rng: SimRng::seed_from_u64(seed),
            ids: EntIdAllocator::default(),
            trace: Trace::new(verbose),
            headers: BTreeMap::new(),
            next_header: 1,
            events: 0,
            sweep_pending: false,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn kernel_mut(&mut self) -> &mut Kernel {
        &mut self.kernel
    }

    pub fn node(&self, addr: &QuantumAddress) -> Option<&NodeRuntime> {
        self.nodes.get(addr)
    }

    fn node_mut(&mut self, addr: &QuantumAddress) -> Result<&mut NodeRuntime, SimError> {
        self.nodes
            .get_mut(addr)
            .ok_or_else(|| SimError::UnknownNode(addr.clone()))
    }

    pub fn set_hints(&mut self, addr: &QuantumAddress, hints: Hints) -> Result<(), SimError> {
        self.node_mut(addr)?.state.hints = hints;
        Ok(())
    }

    pub fn set_capabilities(&mut self, addr: &QuantumAddress, caps: MpLibrary) -> Result<(), SimError> {
        self.node_mut(addr)?.caps = caps;
        Ok(())
    }

    /// Places a pre-shared pair in both endpoints' FT_q.
    pub fn install_resource(&mut self, r: EntanglementResource) -> Result<(), SimError> {
        for end in r.endpoints.clone() {
            self.node_mut(&end)?.state.ftq.insert(r.clone())?;
        }
        Ok(())
    }

    /// Hands a fresh header for `intent` to `origin` at time `at`.
    pub fn submit_intent(
        &mut self,
        origin: &QuantumAddress,
        intent: ServiceIntent,
        payload: BTreeSet<EntId>,
        at: f64,
    ) -> Result<HeaderId, SimError> {
        if !self.nodes.contains_key(origin) {
            return Err(SimError::UnknownNode(origin.clone()));
        }
        if let Some(p) = intent.participants().iter().find(|p| !self.nodes.contains_key(*p)) {
            return Err(SimError::InvalidIntent(format!("participant {p} is not in the topology")));
        }
        if intent.source() != origin {
            return Err(SimError::InvalidIntent(format!(
                "origin {origin} is not the intent source {}",
                intent.source()
            )));
        }
        let header = self.next_header;
        self.next_header += 1;
        self.headers.insert(
            header,
            HeaderReport {
                header,
                intent: intent.clone(),
                submitted_at: at,
                finished_at: None,
                disposition: None,
                stamps: 0,
            },
        );
        let packet = QuantumPacket::new(MetaHeader::new(intent, origin.clone()), payload);
        self.schedule(at, EventKind::Activate { header, packet });
        Ok(header)
    }

    fn schedule(&mut self, at: f64, kind: EventKind) {
        let is_sweep = matches!(kind, EventKind::DecaySweep);
        self.seq += 1;
        self.queue.push(Event { at, seq: self.seq, kind });
        if !is_sweep && !self.sweep_pending && self.params.decay_period > 0.0 {
            let period = self.params.decay_period;
            let next = ((self.now / period).floor() + 1.0) * period;
            self.sweep_pending = true;
            self.seq += 1;
            self.queue.push(Event {
                at: next,
                seq: self.seq,
                kind: EventKind::DecaySweep,
            });
        }
    }

    /// Runs until no events remain.
    pub fn run(mut self) -> Result<RunReport, SimError> {
        while let Some(ev) = self.queue.pop() {
            self.events += 1;
            if self.events > self.params.max_events || ev.at > self.params.max_time {
                return Err(SimError::LimitExceeded {
                    events: self.events - 1,
                    at: self.now,
                    trace: Box::new(self.trace),
                });
            }
            self.now = ev.at;
            self.dispatch(ev.kind);
        }
        let headers = self.headers.into_values().collect();
        Ok(RunReport {
            trace: self.trace,
            headers,
            events: self.events,
            end_time: self.now,
        })
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::DecaySweep => {
                self.sweep_pending = false;
                for n in self.nodes.values_mut() {
                    n.state.ftq.decay_sweep(self.now);
                }
                if !self.queue.is_empty() {
                    let at = self.now + self.params.decay_period;
                    self.sweep_pending = true;
                    self.seq += 1;
                    self.queue.push(Event {
                        at,
                        seq: self.seq,
                        kind: EventKind::DecaySweep,
                    });
                }
            }
            EventKind::Activate { header, packet } => {
                let node = packet.header.holder().clone();
                self.trace.push(TraceRecord::Submit {
                    at: self.now,
                    header,
                    node: node.clone(),
                    intent: packet.header.intent().clone(),
                });
                self.activate(&node, header, packet);
            }
            EventKind::Packet {
                to,
                header,
                packet,
                lamport,
            } => {
                if let Some(n) = self.nodes.get_mut(&to) {
                    n.state.merge(lamport);
                }
                self.activate(&to, header, packet);
            }
            EventKind::Signal {
                src,
                dst,
                signal,
                lamport,
            } => {
                let out = self.with_node(&dst, |ctx| kernel::on_classical_signal(ctx, &src, signal, lamport));
                if let Some(Some(o)) = out {
                    self.finish(o);
                }
            }
            EventKind::Timer { node, header } => {
                let out = self.with_node(&node, |ctx| kernel::on_timer(ctx, header));
                if let Some(Some(o)) = out {
                    self.finish(o);
                }
            }
        }
    }

    fn activate(&mut self, node: &QuantumAddress, header: HeaderId, packet: QuantumPacket) {
        let out = self.with_node(node, |ctx| kernel::execute(ctx, header, packet));
        match out {
            Some(Ok(o)) => self.finish(o),
            Some(Err(e)) => {
                self.trace.push(TraceRecord::Ignored {
                    at: self.now,
                    node: node.clone(),
                    reason: e.to_string(),
                });
                if let Some(h) = self.headers.get_mut(&header) {
                    h.finished_at = Some(self.now);
                    h.disposition = Some(Disposition::Drop);
                }
            }
            None => {}
        }
    }

    fn finish(&mut self, o: KernelOutcome) {
        if let Some(h) = self.headers.get_mut(&o.header) {
            h.stamps = o.packet.header.stamps().len();
            if matches!(o.disposition, Disposition::Deliver | Disposition::Drop) {
                h.finished_at = Some(o.at);
                h.disposition = Some(o.disposition);
                self.queue
                    .retain(|e| !matches!(e.kind, EventKind::Timer { header, .. } if header == o.header));
            }
        }
    }

    /// Runs `f` as a kernel activation at `addr`, then applies its effects.
    fn with_node<R>(&mut self, addr: &QuantumAddress, f: impl FnOnce(&mut NodeCtx<'_>) -> R) -> Option<R> {
        let Self {
            topo,
            params,
            kernel,
            nodes,
            rng,
            ids,
            trace,
            now,
            ..
        } = self;
        let node = nodes.get_mut(addr)?;
        let start = now.max(node.busy_until);
        let mut ctx = NodeCtx {
            addr: addr.clone(),
            state: &mut node.state,
            soft: &mut node.soft,
            caps: &node.caps,
            topo,
            params,
            kernel,
            ids,
            rng,
            trace,
            now: start,
            effects: Vec::new(),
        };
        let r = f(&mut ctx);
        let (end, effects) = (ctx.now, ctx.effects);
        node.busy_until = end;
        for e in effects {
            self.apply(addr, e);
        }
        Some(r)
    }

    fn apply(&mut self, from: &QuantumAddress, e: Effect) {
        match e {
            Effect::Install {
                node,
                resource,
                lamport,
            } => {
                let Some(n) = self.nodes.get_mut(&node) else { return };
                n.state.merge(lamport);
                if let Err(err) = n.state.ftq.insert(resource) {
                    self.trace.push(TraceRecord::Ignored {
                        at: self.now,
                        node,
                        reason: err.to_string(),
                    });
                }
            }
            Effect::Signal { delivery, lamport } => self.schedule(
                delivery.at,
                EventKind::Signal {
                    src: delivery.src,
                    dst: delivery.dst,
                    signal: delivery.payload,
                    lamport,
                },
            ),
            Effect::Forward {
                at,
                to,
                header,
                packet,
                lamport,
            } => self.schedule(
                at,
                EventKind::Packet {
                    to,
                    header,
                    packet,
                    lamport,
                },
            ),
            Effect::Timer { at, header } => self.schedule(
                at,
                EventKind::Timer {
                    node: from.clone(),
                    header,
                },
            ),
        }
    }
}
