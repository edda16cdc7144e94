//! The five micro-protocols (GEN, QP, SYN, SIG, FW) over a scalar Werner-pair
//! model, plus the purification and swapping fidelity algebra.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{QuantumForwardingTable, StateError};
use crate::types::{
    check_fidelity, EntId, EntanglementResource, HeaderError, Link, MetaHeader, QuantumAddress,
};

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpError {
    #[error("fidelity {0} outside [0.25, 1]")]
    Domain(f64),
    #[error("required resource {0} missing")]
    ResourceMissing(EntId),
    #[error("resource {0} expired")]
    Expired(EntId),
    #[error("no classical route from {src} to {dst}")]
    NoClassicalRoute {
        src: QuantumAddress,
        dst: QuantumAddress,
    },
    #[error("{next_hop} is not a neighbor of {node}")]
    NotNeighbor {
        node: QuantumAddress,
        next_hop: QuantumAddress,
    },
    #[error(transparent)]
    Header(#[from] HeaderError),
}

impl From<StateError> for MpError {
    fn from(e: StateError) -> Self {
        match e {
            StateError::Expired { ent_id, .. } => MpError::Expired(ent_id),
            StateError::NotFound(id) | StateError::DuplicateEntId(id) => MpError::ResourceMissing(id),
            StateError::ForeignResource { ent_id, .. } => MpError::ResourceMissing(ent_id),
            StateError::NotNeighbor { owner, next_hop, .. } => MpError::NotNeighbor {
                node: owner,
                next_hop,
            },
        }
    }
}

/// BBPSSW recurrence on two Werner pairs. Returns `(f_out, p_succ)`.
pub fn purify_fidelity(f1: f64, f2: f64) -> Result<(f64, f64), MpError> {
    check_fidelity(f1).map_err(|_| MpError::Domain(f1))?;
    check_fidelity(f2).map_err(|_| MpError::Domain(f2))?;
    let (e1, e2) = (1.0 - f1, 1.0 - f2);
    let p_succ = f1 * f2 + f1 * e2 / 3.0 + e1 * f2 / 3.0 + 5.0 * e1 * e2 / 9.0;
    let f_out = (f1 * f2 + e1 * e2 / 9.0) / p_succ;
    Ok((f_out, p_succ))
}

/// Fidelity of the pair produced by an ideal Bell measurement on the shared node.
pub fn swap_fidelity(f1: f64, f2: f64) -> Result<f64, MpError> {
    check_fidelity(f1).map_err(|_| MpError::Domain(f1))?;
    check_fidelity(f2).map_err(|_| MpError::Domain(f2))?;
    Ok(f1 * f2 + (1.0 - f1) * (1.0 - f2) / 3.0)
}

/// Per-link physical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub p_gen: f64,
    pub f_gen: f64,
    pub tau_budget: f64,
    #[serde(default)]
    pub t_coh: Option<f64>,
    #[serde(default)]
    pub sync_delay: f64,
    #[serde(default = "default_attempt_time")]
    pub attempt_time: f64,
}

fn default_attempt_time() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MpKind {
    Gen,
    Qp,
    Syn,
    Sig,
    Fw,
}

impl MpKind {
    pub const ALL: [MpKind; 5] = [MpKind::Gen, MpKind::Qp, MpKind::Syn, MpKind::Sig, MpKind::Fw];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpOp {
    Purify,
    Bsm,
    Pauli,
    SwapBsm,
}

/// Two classical outcome bits of a Bell measurement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BsmBits {
    pub x: u8,
    pub z: u8,
}

impl BsmBits {
    fn draw(rng: &mut SimRng) -> Self {
        let outcome: u8 = rng.gen_range(0..4);
        Self {
            x: outcome & 1,
            z: outcome >> 1,
        }
    }

    /// Composition of two Pauli frames (Paulis commute up to phase).
    pub fn combine(self, other: BsmBits) -> BsmBits {
        BsmBits {
            x: self.x ^ other.x,
            z: self.z ^ other.z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Z,
    Y,
}

impl Pauli {
    pub fn from_bits(bits: BsmBits) -> Self {
        match (bits.x, bits.z) {
            (0, 0) => Pauli::I,
            (1, 0) => Pauli::X,
            (0, 1) => Pauli::Z,
            _ => Pauli::Y,
        }
    }
}

/// One MP call with its bound parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mp", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MpInvocation {
    Gen { link: Link },
    Qp { op: QpOp },
    Syn { link: Link },
    Sig { dst: QuantumAddress, what: String },
    Fw { next_hop: QuantumAddress },
}

impl MpInvocation {
    pub fn kind(&self) -> MpKind {
        match self {
            MpInvocation::Gen { .. } => MpKind::Gen,
            MpInvocation::Qp { .. } => MpKind::Qp,
            MpInvocation::Syn { .. } => MpKind::Syn,
            MpInvocation::Sig { .. } => MpKind::Sig,
            MpInvocation::Fw { .. } => MpKind::Fw,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpResult {
    pub success: bool,
    pub produced: Option<EntanglementResource>,
    pub side_data: Option<BsmBits>,
    pub elapsed: f64,
}

impl MpResult {
    fn done(elapsed: f64) -> Self {
        Self {
            success: true,
            produced: None,
            side_data: None,
            elapsed,
        }
    }
}

/// Run-wide source of fresh resource identifiers.
#[derive(Debug, Clone, Default)]
pub struct EntIdAllocator {
    next: u64,
}

impl EntIdAllocator {
    pub fn fresh(&mut self) -> EntId {
        self.next += 1;
        EntId(format!("e{:04}", self.next))
    }
}

/// Mutable facilities an MP call may draw on.
pub struct MpContext<'a> {
    pub now: f64,
    pub qp_time: f64,
    pub ids: &'a mut EntIdAllocator,
    pub rng: &'a mut SimRng,
}

/// One heralded generation attempt on `link`.
pub fn invoke_gen(link: &Link, cfg: &LinkConfig, ctx: &mut MpContext<'_>) -> MpResult {
    let success = ctx.rng.gen_bool(cfg.p_gen.clamp(0.0, 1.0));
    let done_at = ctx.now + cfg.attempt_time;
    let produced = success.then(|| EntanglementResource {
        ent_id: ctx.ids.fresh(),
        endpoints: [link.0.clone(), link.1.clone()],
        fidelity: cfg.f_gen,
        created_at: done_at,
        expires_at: done_at + cfg.tau_budget,
        t_coh: cfg.t_coh,
        fidelity_at: done_at,
    });
    MpResult {
        success,
        produced,
        side_data: None,
        elapsed: cfg.attempt_time,
    }
}

/// Synchronization is modeled as a pure delay.
pub fn invoke_syn(cfg: &LinkConfig) -> MpResult {
    MpResult::done(cfg.sync_delay)
}

/// Inputs to a local quantum-processing call.
#[derive(Debug, Clone, PartialEq)]
pub enum QpInput {
    /// Consume `sacrifice` to (probabilistically) improve `keep`; both on one link.
    Purify { keep: EntId, sacrifice: EntId },
    /// Bell measurement on the owner's halves of two pairs, stitching their far ends.
    SwapBsm { left: EntId, right: EntId },
    /// Teleport-side measurement of the input qubit against the owner's ebit half.
    Bsm { ebit: EntId },
    Pauli { bits: BsmBits },
}

impl QpInput {
    pub fn op(&self) -> QpOp {
        match self {
            QpInput::Purify { .. } => QpOp::Purify,
            QpInput::SwapBsm { .. } => QpOp::SwapBsm,
            QpInput::Bsm { .. } => QpOp::Bsm,
            QpInput::Pauli { .. } => QpOp::Pauli,
        }
    }
}

fn live<'t>(
    table: &'t QuantumForwardingTable,
    id: &EntId,
    now: f64,
) -> Result<&'t EntanglementResource, MpError> {
    let r = table
        .get(id)
        .ok_or_else(|| MpError::ResourceMissing(id.clone()))?;
    if r.is_expired(now) {
        return Err(MpError::Expired(id.clone()));
    }
    Ok(r)
}

/// Local quantum processing against the owner's table.
///
/// Purify leaves the survivor in `table` under its original id (or removes
/// both pairs on failure). SwapBsm removes both inputs and returns the new
/// end-to-end pair as `produced`; it is not inserted since the owner is not
/// one of its endpoints.
pub fn invoke_qp(
    input: &QpInput,
    table: &mut QuantumForwardingTable,
    ctx: &mut MpContext<'_>,
) -> Result<MpResult, MpError> {
    let now = ctx.now;
    match input {
        QpInput::Purify { keep, sacrifice } => {
            let a = live(table, keep, now)?;
            let b = live(table, sacrifice, now)?;
            if keep == sacrifice || !a.connects(&b.endpoints[0], &b.endpoints[1]) {
                return Err(MpError::ResourceMissing(sacrifice.clone()));
            }
            let (f_out, p_succ) = purify_fidelity(a.fidelity_now(now), b.fidelity_now(now))?;
            let mut survivor = a.clone();
            table.discard(sacrifice);
            table.discard(keep);
            let success = ctx.rng.gen_bool(p_succ.clamp(0.0, 1.0));
            let produced = if success {
                survivor.fidelity = f_out;
                survivor.fidelity_at = now + ctx.qp_time;
                table.insert(survivor.clone())?;
                Some(survivor)
            } else {
                None
            };
            Ok(MpResult {
                success,
                produced,
                side_data: None,
                elapsed: ctx.qp_time,
            })
        }
        QpInput::SwapBsm { left, right } => {
            let l = live(table, left, now)?.clone();
            let r = live(table, right, now)?.clone();
            let owner = table.owner().clone();
            let (Some(far_l), Some(far_r)) = (l.peer_of(&owner), r.peer_of(&owner)) else {
                return Err(MpError::ResourceMissing(right.clone()));
            };
            let fidelity = swap_fidelity(l.fidelity_now(now), r.fidelity_now(now))?;
            let done_at = now + ctx.qp_time;
            let t_coh = match (l.t_coh, r.t_coh) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            let produced = EntanglementResource {
                ent_id: ctx.ids.fresh(),
                endpoints: [far_l.clone(), far_r.clone()],
                fidelity,
                created_at: done_at,
                expires_at: l.expires_at.min(r.expires_at),
                t_coh,
                fidelity_at: done_at,
            };
            table.discard(left);
            table.discard(right);
            Ok(MpResult {
                success: true,
                produced: Some(produced),
                side_data: Some(BsmBits::draw(ctx.rng)),
                elapsed: ctx.qp_time,
            })
        }
        QpInput::Bsm { ebit } => {
            live(table, ebit, now)?;
            table.discard(ebit);
            Ok(MpResult {
                side_data: Some(BsmBits::draw(ctx.rng)),
                ..MpResult::done(ctx.qp_time)
            })
        }
        QpInput::Pauli { bits } => Ok(MpResult {
            side_data: Some(*bits),
            ..MpResult::done(ctx.qp_time)
        }),
    }
}

/// Classical reachability as seen by SIG and FW.
pub trait ClassicalNet {
    /// Latency of the direct classical link, if `a` and `b` are neighbors.
    fn neighbor_latency(&self, a: &QuantumAddress, b: &QuantumAddress) -> Option<f64>;
    /// Summed per-hop latency along forwarding tables from `src` to `dst`.
    fn route_latency(&self, src: &QuantumAddress, dst: &QuantumAddress) -> Option<f64>;
}

/// A message that the event loop must deliver at `at`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledDelivery<T> {
    pub at: f64,
    pub src: QuantumAddress,
    pub dst: QuantumAddress,
    pub payload: T,
}

pub fn invoke_sig<T>(
    src: &QuantumAddress,
    dst: &QuantumAddress,
    payload: T,
    net: &dyn ClassicalNet,
    now: f64,
) -> Result<ScheduledDelivery<T>, MpError> {
    let latency = net
        .route_latency(src, dst)
        .ok_or_else(|| MpError::NoClassicalRoute {
            src: src.clone(),
            dst: dst.clone(),
        })?;
    Ok(ScheduledDelivery {
        at: now + latency,
        src: src.clone(),
        dst: dst.clone(),
        payload,
    })
}

/// Hands the header to `next_hop`: authority moves at send time, delivery
/// happens one link latency later.
pub fn invoke_fw(
    header: &mut MetaHeader,
    sender: &QuantumAddress,
    next_hop: &QuantumAddress,
    net: &dyn ClassicalNet,
    now: f64,
) -> Result<f64, MpError> {
    let latency = net
        .neighbor_latency(sender, next_hop)
        .ok_or_else(|| MpError::NotNeighbor {
            node: sender.clone(),
            next_hop: next_hop.clone(),
        })?;
    header.transfer_authority(sender, next_hop)?;
    Ok(now + latency)
}
