//! Per-node dynamic kernel: planner, executor and engine.
//!
//! The planner turns `(intent, stamps, state)` into a local [`PoA`]; the
//! executor picks the feasible frontier and binds each action to a [`MeP`];
//! the engine runs the MePs and is the only component that appends stamps.

mod engine;
mod executor;
mod planner;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mp::{BsmBits, EntIdAllocator, MpInvocation, MpKind, ScheduledDelivery, SimRng};
use crate::sim::{EngineParams, HeaderId, Topology};
use crate::state::InternalState;
use crate::trace::Trace;
use crate::types::{ActionKind, EntId, EntanglementResource, Link, QuantumAddress, QuantumPacket, Service};

pub use engine::{execute, on_classical_signal, on_timer};
pub use executor::{map_and_bind, schedule, select_feasible, view_induced_edges, Selection};
pub use planner::{committed_actions, PlannerStrategy, TeleportPlanner};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("no planner registered for service {0}")]
    UnsupportedService(Service),
    #[error("no next hop toward {dst} at {node}")]
    NoRoute {
        node: QuantumAddress,
        dst: QuantumAddress,
        action: ActionId,
    },
    #[error("{node} lacks micro-protocol {mp:?}")]
    CapabilityMissing {
        node: QuantumAddress,
        mp: MpKind,
        action: ActionId,
    },
    #[error("action {0:?} has no registered mapping")]
    Unmapped(ActionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u32);

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Guards {
    pub f_min: f64,
    pub tau_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub id: ActionId,
    pub kind: ActionKind,
    pub guards: Guards,
    pub local_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTag {
    Logical,
    Resource,
    ViewInduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: ActionId,
    pub to: ActionId,
    pub tag: EdgeTag,
}

/// Node-local plan of actions: a speculative DAG, never serialized into the packet.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoA {
    pub actions: Vec<Action>,
    pub edges: BTreeSet<Edge>,
}

impl PoA {
    pub fn add(&mut self, kind: ActionKind, guards: Guards) -> ActionId {
        let id = ActionId(self.actions.len() as u32);
        let local_only = kind.is_local_only();
        self.actions.push(Action {
            id,
            kind,
            guards,
            local_only,
        });
        id
    }

    pub fn edge(&mut self, from: ActionId, to: ActionId, tag: EdgeTag) {
        self.edges.insert(Edge { from, to, tag });
    }

    pub fn action(&self, id: ActionId) -> &Action {
        &self.actions[id.0 as usize]
    }

    pub fn find(&self, pred: impl Fn(&ActionKind) -> bool) -> Option<ActionId> {
        self.actions.iter().find(|a| pred(&a.kind)).map(|a| a.id)
    }

    pub fn terminals(&self) -> impl Iterator<Item = &Action> {
        self.actions.iter().filter(|a| a.kind.is_terminal())
    }

    /// Kahn's algorithm over `edges`; `None` if there is a cycle or a dangling edge.
    pub fn topo_order_with(&self, edges: &BTreeSet<Edge>) -> Option<Vec<ActionId>> {
        let n = self.actions.len();
        let mut indeg = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in edges {
            let (f, t) = (e.from.0 as usize, e.to.0 as usize);
            if f >= n || t >= n {
                return None;
            }
            succ[f].push(t);
            indeg[t] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(ActionId(i as u32));
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    pub fn topo_order(&self) -> Option<Vec<ActionId>> {
        self.topo_order_with(&self.edges)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topo_order().is_some()
    }
}

/// How link preparation is cut into micro-protocols.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMapping {
    /// SYN, then GEN attempts pumped through QP(purify).
    #[default]
    Composed,
    /// A single QP when an adequate pair is already present.
    Fused,
}

/// What a MeP does when the engine runs it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "body", rename_all = "snake_case")]
pub enum MepBody {
    LinkPrep {
        link: Link,
        /// Adequate pair already in the table; certify it instead of generating.
        reuse: Option<EntId>,
    },
    Swap {
        left: QuantumAddress,
        right: QuantumAddress,
    },
    Forward {
        next_hop: QuantumAddress,
    },
    Consume {
        src: QuantumAddress,
    },
    Deliver,
    Drop,
    Hold,
}

/// An action bound to a concrete sequence of MP invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeP {
    pub action_id: ActionId,
    /// The action with placeholders bound.
    pub action: ActionKind,
    pub steps: Vec<MpInvocation>,
    pub body: MepBody,
    pub max_retries: u32,
    pub backoff: f64,
    pub timeout: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "disposition", rename_all = "snake_case")]
pub enum Disposition {
    Forward { next_hop: QuantumAddress },
    Deliver,
    Drop,
    Hold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelOutcome {
    pub header: HeaderId,
    /// Node-local time of the disposition.
    pub at: f64,
    pub disposition: Disposition,
    pub packet: QuantumPacket,
}

/// Classical side-channel messages exchanged between kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "signal", rename_all = "snake_case")]
pub enum Signal {
    /// Swap result for the downstream end: relabel `superseded` halves as `pair`.
    SwapOutcome {
        header: HeaderId,
        pair: EntanglementResource,
        superseded: Vec<EntId>,
        frame: BsmBits,
    },
    ReadyForBsm {
        header: HeaderId,
        pair: EntanglementResource,
        superseded: Vec<EntId>,
    },
    BsmOutcome {
        header: HeaderId,
        ent_id: EntId,
        bits: BsmBits,
    },
    CompletionAck {
        header: HeaderId,
    },
}

impl Signal {
    pub fn header(&self) -> HeaderId {
        match self {
            Signal::SwapOutcome { header, .. }
            | Signal::ReadyForBsm { header, .. }
            | Signal::BsmOutcome { header, .. }
            | Signal::CompletionAck { header } => *header,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Signal::SwapOutcome { .. } => "SwapOutcome",
            Signal::ReadyForBsm { .. } => "ReadyForBSM",
            Signal::BsmOutcome { .. } => "BsmOutcome",
            Signal::CompletionAck { .. } => "CompletionAck",
        }
    }
}

/// Side effects of one kernel activation, applied by the event loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    /// Peer half of a freshly committed link pair.
    Install {
        node: QuantumAddress,
        resource: EntanglementResource,
        lamport: u64,
    },
    Signal {
        delivery: ScheduledDelivery<Signal>,
        lamport: u64,
    },
    Forward {
        at: f64,
        to: QuantumAddress,
        header: HeaderId,
        packet: QuantumPacket,
        lamport: u64,
    },
    Timer {
        at: f64,
        header: HeaderId,
    },
}

/// Initiator soft state between forwarding and completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Hold {
    pub dst: QuantumAddress,
    pub bsm_done: bool,
}

/// A packet waiting at its holder for classical input.
#[derive(Debug, Clone, PartialEq)]
pub struct Parked {
    pub packet: QuantumPacket,
    pub poa: PoA,
    pub done: BTreeSet<ActionId>,
    pub consume: ActionId,
    pub src: QuantumAddress,
    pub pair: EntId,
    pub deadline: f64,
}

/// Kernel-side per-node soft state (never exported in stamps).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftState {
    pub holds: BTreeMap<HeaderId, Hold>,
    pub parked: BTreeMap<HeaderId, Parked>,
    /// Accumulated Pauli frame per pair, from upstream swaps.
    pub frames: BTreeMap<EntId, BsmBits>,
}

/// Micro-protocols installed at a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MpLibrary(pub BTreeSet<MpKind>);

impl Default for MpLibrary {
    fn default() -> Self {
        Self(MpKind::ALL.into_iter().collect())
    }
}

impl MpLibrary {
    pub fn has(&self, mp: MpKind) -> bool {
        self.0.contains(&mp)
    }
}

/// Planner strategies keyed by service.
pub struct PlannerRegistry {
    strategies: BTreeMap<Service, Box<dyn PlannerStrategy + Send + Sync>>,
}

impl std::fmt::Debug for PlannerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.strategies.keys()).finish()
    }
}

impl Default for PlannerRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Service::Teleport, Box::new(TeleportPlanner));
        r
    }
}

impl PlannerRegistry {
    pub fn empty() -> Self {
        Self {
            strategies: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, service: Service, strategy: Box<dyn PlannerStrategy + Send + Sync>) {
        self.strategies.insert(service, strategy);
    }

    pub fn get(&self, service: Service) -> Option<&(dyn PlannerStrategy + Send + Sync)> {
        self.strategies.get(&service).map(|b| b.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Kernel {
    pub planners: PlannerRegistry,
    pub link_mapping: LinkMapping,
}

/// Everything a kernel activation at one node may touch.
pub struct NodeCtx<'a> {
    pub addr: QuantumAddress,
    pub state: &'a mut InternalState,
    pub soft: &'a mut SoftState,
    pub caps: &'a MpLibrary,
    pub topo: &'a Topology,
    pub params: &'a EngineParams,
    pub kernel: &'a Kernel,
    pub ids: &'a mut EntIdAllocator,
    pub rng: &'a mut SimRng,
    pub trace: &'a mut Trace,
    pub now: f64,
    pub effects: Vec<Effect>,
}

/// Read-only view a planner works from.
pub struct PlanContext<'a> {
    pub node: &'a QuantumAddress,
    pub state: &'a InternalState,
    pub topo: &'a Topology,
    pub now: f64,
}

pub fn plan_poa(
    registry: &PlannerRegistry,
    intent: &crate::types::ServiceIntent,
    stamps: &[crate::types::Stamp],
    ctx: &PlanContext<'_>,
) -> Result<PoA, KernelError> {
    let strategy = registry
        .get(intent.service())
        .ok_or(KernelError::UnsupportedService(intent.service()))?;
    Ok(strategy.plan(intent, stamps, ctx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_detected() {
        let mut p = PoA::default();
        let a = p.add(ActionKind::ActDeliver, Guards::default());
        let b = p.add(ActionKind::ActDrop, Guards::default());
        p.edge(a, b, EdgeTag::Logical);
        assert!(p.is_acyclic());
        p.edge(b, a, EdgeTag::Logical);
        assert!(!p.is_acyclic());
    }

    #[test]
    fn hold_is_local_only() {
        let mut p = PoA::default();
        let h = p.add(ActionKind::ActHold, Guards::default());
        assert!(p.action(h).local_only);
    }
}
