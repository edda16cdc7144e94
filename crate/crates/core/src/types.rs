//! Packet-level and protocol-level data model.
//!
//! A [`MetaHeader`] travels with every [`QuantumPacket`]. It carries the
//! immutable [`ServiceIntent`] and an append-only log of [`Stamp`]s, and it
//! names the single node currently allowed to append to that log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Lowest fidelity a two-qubit Werner pair can have (the fully mixed state).
pub const FIDELITY_FLOOR: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypeError {
    #[error("quantum address must be non-empty")]
    EmptyAddress,
    #[error("intent needs at least two participants, got {0}")]
    TooFewParticipants(usize),
    #[error("participant {0} listed twice")]
    DuplicateParticipant(QuantumAddress),
    #[error("fidelity {0} outside [0.25, 1]")]
    FidelityOutOfRange(f64),
    #[error("duration {0} must be non-negative")]
    NegativeDuration(f64),
    #[error("resource expires at {expires_at} before it is created at {created_at}")]
    ExpiresBeforeCreation { created_at: f64, expires_at: f64 },
    #[error("resource endpoints must be distinct, got {0} twice")]
    DegenerateEndpoints(QuantumAddress),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeaderError {
    #[error("{writer} is not the holder of the meta-header (holder is {holder})")]
    NotHolder {
        writer: QuantumAddress,
        holder: QuantumAddress,
    },
    #[error("stamp timestamp {got} does not exceed last timestamp {last}")]
    NonMonotone { last: u64, got: u64 },
    #[error("local-only action {0} cannot be stamped")]
    NotStampable(ActionKind),
    #[error("stamp support must be non-empty")]
    EmptySupport,
}

pub(crate) fn check_fidelity(f: f64) -> Result<f64, TypeError> {
    if (FIDELITY_FLOOR..=1.0).contains(&f) {
        Ok(f)
    } else {
        Err(TypeError::FidelityOutOfRange(f))
    }
}

/// Opaque per-node identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QuantumAddress(String);

impl QuantumAddress {
    pub fn new(value: impl Into<String>) -> Result<Self, TypeError> {
        let value = value.into();
        if value.is_empty() {
            return Err(TypeError::EmptyAddress);
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for QuantumAddress {
    type Error = TypeError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<QuantumAddress> for String {
    fn from(value: QuantumAddress) -> Self {
        value.0
    }
}

impl FromStr for QuantumAddress {
    type Err = TypeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl fmt::Display for QuantumAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Network-wide identifier of an entanglement resource.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntId(pub String);

impl fmt::Display for EntId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntId {
    fn from(value: &str) -> Self {
        Self(value.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Service {
    Teleport,
}

impl fmt::Display for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Service::Teleport => f.write_str("TELEPORT"),
        }
    }
}

/// Quantitative targets of an intent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub f_min: f64,
    pub tau_min: f64,
}

/// Declarative request: what to achieve and between whom. Never how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntent")]
pub struct ServiceIntent {
    service: Service,
    participants: Vec<QuantumAddress>,
    targets: Targets,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    policy: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawIntent {
    service: Service,
    participants: Vec<QuantumAddress>,
    targets: Targets,
    #[serde(default)]
    policy: BTreeMap<String, Value>,
}

impl TryFrom<RawIntent> for ServiceIntent {
    type Error = TypeError;
    fn try_from(raw: RawIntent) -> Result<Self, Self::Error> {
        ServiceIntent::new(raw.service, raw.participants, raw.targets, raw.policy)
    }
}

impl ServiceIntent {
    pub fn new(
        service: Service,
        participants: Vec<QuantumAddress>,
        targets: Targets,
        policy: BTreeMap<String, Value>,
    ) -> Result<Self, TypeError> {
        if participants.len() < 2 {
            return Err(TypeError::TooFewParticipants(participants.len()));
        }
        let mut seen = BTreeSet::new();
        for p in &participants {
            if !seen.insert(p) {
                return Err(TypeError::DuplicateParticipant(p.clone()));
            }
        }
        check_fidelity(targets.f_min)?;
        if !(targets.tau_min >= 0.0) {
            return Err(TypeError::NegativeDuration(targets.tau_min));
        }
        Ok(Self {
            service,
            participants,
            targets,
            policy,
        })
    }

    /// Two-party teleport request from `src` to `dst`.
    pub fn teleport(
        src: QuantumAddress,
        dst: QuantumAddress,
        f_min: f64,
        tau_min: f64,
    ) -> Result<Self, TypeError> {
        Self::new(
            Service::Teleport,
            vec![src, dst],
            Targets { f_min, tau_min },
            BTreeMap::new(),
        )
    }

    pub fn service(&self) -> Service {
        self.service
    }

    pub fn participants(&self) -> &[QuantumAddress] {
        &self.participants
    }

    pub fn targets(&self) -> Targets {
        self.targets
    }

    pub fn policy(&self) -> &BTreeMap<String, Value> {
        &self.policy
    }

    /// First participant; for bipartite services this is the source.
    pub fn source(&self) -> &QuantumAddress {
        &self.participants[0]
    }

    /// Last participant; for bipartite services this is the destination.
    pub fn destination(&self) -> &QuantumAddress {
        self.participants.last().expect("at least two participants")
    }
}

/// A shared pair with its descriptors, as recorded in a quantum forwarding table.
///
/// `fidelity` is the value at `fidelity_at`; [`EntanglementResource::fidelity_now`]
/// projects it forward under Werner depolarization with time constant `t_coh`
/// (`None` means no decay).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementResource {
    pub ent_id: EntId,
    pub endpoints: [QuantumAddress; 2],
    pub fidelity: f64,
    pub created_at: f64,
    pub expires_at: f64,
    #[serde(default)]
    pub t_coh: Option<f64>,
    #[serde(default)]
    pub fidelity_at: f64,
}

impl EntanglementResource {
    pub fn new(
        ent_id: EntId,
        endpoints: [QuantumAddress; 2],
        fidelity: f64,
        created_at: f64,
        expires_at: f64,
        t_coh: Option<f64>,
    ) -> Result<Self, TypeError> {
        let r = Self {
            ent_id,
            endpoints,
            fidelity,
            created_at,
            expires_at,
            t_coh,
            fidelity_at: created_at,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        check_fidelity(self.fidelity)?;
        if self.endpoints[0] == self.endpoints[1] {
            return Err(TypeError::DegenerateEndpoints(self.endpoints[0].clone()));
        }
        if !(self.expires_at >= self.created_at) {
            return Err(TypeError::ExpiresBeforeCreation {
                created_at: self.created_at,
                expires_at: self.expires_at,
            });
        }
        Ok(())
    }

    pub fn has_endpoint(&self, node: &QuantumAddress) -> bool {
        self.endpoints.contains(node)
    }

    /// True when the pair joins `a` and `b`, in either order.
    pub fn connects(&self, a: &QuantumAddress, b: &QuantumAddress) -> bool {
        (&self.endpoints[0] == a && &self.endpoints[1] == b)
            || (&self.endpoints[0] == b && &self.endpoints[1] == a)
    }

    pub fn peer_of(&self, node: &QuantumAddress) -> Option<&QuantumAddress> {
        if &self.endpoints[0] == node {
            Some(&self.endpoints[1])
        } else if &self.endpoints[1] == node {
            Some(&self.endpoints[0])
        } else {
            None
        }
    }

    pub fn is_expired(&self, now: f64) -> bool {
        self.expires_at <= now
    }

    /// Remaining coherence budget at `now` (never negative).
    pub fn remaining(&self, now: f64) -> f64 {
        (self.expires_at - now).max(0.0)
    }

    pub fn fidelity_now(&self, now: f64) -> f64 {
        decayed_fidelity(self.fidelity, now - self.fidelity_at, self.t_coh)
    }
}

/// `F(t) = 0.25 + (F0 - 0.25) * exp(-dt / t_coh)`; `dt <= 0` leaves `f0` as is.
pub fn decayed_fidelity(f0: f64, dt: f64, t_coh: Option<f64>) -> f64 {
    match t_coh {
        Some(t) if dt > 0.0 => FIDELITY_FLOOR + (f0 - FIDELITY_FLOOR) * (-dt / t).exp(),
        _ => f0,
    }
}

/// Ordered node pair naming a quantum link (or the path segment it serves).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link(pub QuantumAddress, pub QuantumAddress);

impl Link {
    pub fn new(a: QuantumAddress, b: QuantumAddress) -> Self {
        Self(a, b)
    }

    pub fn same_endpoints(&self, other: &Link) -> bool {
        (self.0 == other.0 && self.1 == other.1) || (self.0 == other.1 && self.1 == other.0)
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0, self.1)
    }
}

/// Every action kind the kernel knows about, stampable or not.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Syn {
        link: Link,
    },
    Gen {
        link: Link,
    },
    Purify {
        link: Link,
    },
    /// Link preparation: the composite of SYN, GEN and PURIFY on one link.
    LinkPr {
        link: Link,
    },
    Swap {
        left: QuantumAddress,
        mid: QuantumAddress,
        right: QuantumAddress,
    },
    ActForward {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        next_hop: Option<QuantumAddress>,
    },
    ActDeliver,
    ActDrop,
    ActHold,
    BsmA,
    ConsumeTp {
        src: QuantumAddress,
        dst: QuantumAddress,
    },
}

impl ActionKind {
    /// Soft-state actions that live only inside one node.
    pub fn is_local_only(&self) -> bool {
        matches!(self, ActionKind::ActHold | ActionKind::BsmA)
    }

    /// Sub-steps of link preparation; they commit only through `LINK_PR`.
    pub fn is_link_step(&self) -> bool {
        matches!(
            self,
            ActionKind::Syn { .. } | ActionKind::Gen { .. } | ActionKind::Purify { .. }
        )
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            ActionKind::ActForward { .. } | ActionKind::ActDeliver | ActionKind::ActDrop
        )
    }

    pub fn is_stampable(&self) -> bool {
        !self.is_local_only() && !self.is_link_step()
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActionKind::Syn { .. } => "SYN",
            ActionKind::Gen { .. } => "GEN",
            ActionKind::Purify { .. } => "PURIFY",
            ActionKind::LinkPr { .. } => "LINK_PR",
            ActionKind::Swap { .. } => "SWAP",
            ActionKind::ActForward { .. } => "ACT_FORWARD",
            ActionKind::ActDeliver => "ACT_DELIVER",
            ActionKind::ActDrop => "ACT_DROP",
            ActionKind::ActHold => "ACT_HOLD",
            ActionKind::BsmA => "BSM_A",
            ActionKind::ConsumeTp { .. } => "CONSUME_TP",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.name();
        match self {
            ActionKind::Syn { link }
            | ActionKind::Gen { link }
            | ActionKind::Purify { link }
            | ActionKind::LinkPr { link } => write!(f, "{name}({link})"),
            ActionKind::Swap { left, mid, right } => write!(f, "{name}({left}-{mid}-{right})"),
            ActionKind::ActForward { next_hop: Some(nh) } => write!(f, "{name}({nh})"),
            ActionKind::ActForward { next_hop: None } => write!(f, "{name}(^)"),
            ActionKind::ConsumeTp { src, dst } => write!(f, "{name}({src}->{dst})"),
            _ => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    Fail,
}

/// Certified record of one action commit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub action: ActionKind,
    pub support: Vec<QuantumAddress>,
    pub ts: u64,
    #[serde(default)]
    pub ent_ids: BTreeSet<EntId>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

impl Stamp {
    pub fn ok(action: ActionKind, support: Vec<QuantumAddress>, ts: u64) -> Self {
        Self {
            action,
            support,
            ts,
            ent_ids: BTreeSet::new(),
            outcome: Outcome::Ok,
            meta: BTreeMap::new(),
        }
    }

    pub fn failure(action: ActionKind, support: Vec<QuantumAddress>, ts: u64) -> Self {
        Self {
            outcome: Outcome::Fail,
            ..Self::ok(action, support, ts)
        }
    }

    pub fn with_ent_ids(mut self, ids: impl IntoIterator<Item = EntId>) -> Self {
        self.ent_ids.extend(ids);
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_owned(), value.into());
        self
    }

    /// `KIND{support}` rendering, e.g. `LINK_PR{A,Y}`.
    pub fn label(&self) -> String {
        let support: Vec<&str> = self.support.iter().map(QuantumAddress::as_str).collect();
        match &self.action {
            ActionKind::ActForward { next_hop: Some(nh) } => {
                format!("ACT_FORWARD({nh}){{{}}}", support.join(","))
            }
            a => format!("{}{{{}}}", a.name(), support.join(",")),
        }
    }
}

/// In-band control record. The intent is fixed at creation and stamps can
/// only be appended, by the current holder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaHeader {
    intent: ServiceIntent,
    stamps: Vec<Stamp>,
    holder: QuantumAddress,
}

impl MetaHeader {
    pub fn new(intent: ServiceIntent, holder: QuantumAddress) -> Self {
        Self {
            intent,
            stamps: Vec::new(),
            holder,
        }
    }

    pub fn intent(&self) -> &ServiceIntent {
        &self.intent
    }

    pub fn stamps(&self) -> &[Stamp] {
        &self.stamps
    }

    pub fn holder(&self) -> &QuantumAddress {
        &self.holder
    }

    pub fn last_ts(&self) -> Option<u64> {
        self.stamps.last().map(|s| s.ts)
    }

    pub fn append_stamp(&mut self, writer: &QuantumAddress, stamp: Stamp) -> Result<(), HeaderError> {
        if writer != &self.holder {
            return Err(HeaderError::NotHolder {
                writer: writer.clone(),
                holder: self.holder.clone(),
            });
        }
        if let Some(last) = self.last_ts() {
            if stamp.ts <= last {
                return Err(HeaderError::NonMonotone { last, got: stamp.ts });
            }
        }
        if !stamp.action.is_stampable() {
            return Err(HeaderError::NotStampable(stamp.action));
        }
        if stamp.support.is_empty() {
            return Err(HeaderError::EmptySupport);
        }
        self.stamps.push(stamp);
        Ok(())
    }

    pub fn transfer_authority(
        &mut self,
        from: &QuantumAddress,
        to: &QuantumAddress,
    ) -> Result<(), HeaderError> {
        if from != &self.holder {
            return Err(HeaderError::NotHolder {
                writer: from.clone(),
                holder: self.holder.clone(),
            });
        }
        self.holder = to.clone();
        Ok(())
    }
}

/// A meta-header plus the ebit halves it logically carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumPacket {
    pub header: MetaHeader,
    #[serde(default)]
    pub payload: BTreeSet<EntId>,
}

impl QuantumPacket {
    pub fn new(header: MetaHeader, payload: BTreeSet<EntId>) -> Self {
        Self { header, payload }
    }

    /// Non-perturbing view of intent and stamp log.
    pub fn read_header(&self) -> (&ServiceIntent, &[Stamp]) {
        (self.header.intent(), self.header.stamps())
    }
}
