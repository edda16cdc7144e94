//! Per-node internal state: classical and quantum forwarding tables, hints,
//! and the node's Lamport counter.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sim::lamport_merge;
use crate::types::{EntId, EntanglementResource, QuantumAddress};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("resource {0} already present")]
    DuplicateEntId(EntId),
    #[error("resource {ent_id} does not involve {owner}")]
    ForeignResource { ent_id: EntId, owner: QuantumAddress },
    #[error("resource {0} not found")]
    NotFound(EntId),
    #[error("resource {ent_id} expired at {expires_at}")]
    Expired { ent_id: EntId, expires_at: f64 },
    #[error("next hop {next_hop} for {dst} is not a neighbor of {owner}")]
    NotNeighbor {
        owner: QuantumAddress,
        dst: QuantumAddress,
        next_hop: QuantumAddress,
    },
}

/// Destination -> next-hop neighbor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassicalForwardingTable {
    pub next_hop: BTreeMap<QuantumAddress, QuantumAddress>,
}

impl ClassicalForwardingTable {
    pub fn lookup(&self, dst: &QuantumAddress) -> Option<&QuantumAddress> {
        self.next_hop.get(dst)
    }

    /// Checks that every next hop is one of `neighbors`.
    pub fn validate(
        &self,
        owner: &QuantumAddress,
        neighbors: &BTreeSet<QuantumAddress>,
    ) -> Result<(), StateError> {
        for (dst, nh) in &self.next_hop {
            if !neighbors.contains(nh) {
                return Err(StateError::NotNeighbor {
                    owner: owner.clone(),
                    dst: dst.clone(),
                    next_hop: nh.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Entanglement inventory of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumForwardingTable {
    owner: QuantumAddress,
    entries: BTreeMap<EntId, EntanglementResource>,
}

impl QuantumForwardingTable {
    pub fn new(owner: QuantumAddress) -> Self {
        Self {
            owner,
            entries: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> &QuantumAddress {
        &self.owner
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EntanglementResource> {
        self.entries.values()
    }

    pub fn get(&self, id: &EntId) -> Option<&EntanglementResource> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &EntId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn insert(&mut self, resource: EntanglementResource) -> Result<(), StateError> {
        if !resource.has_endpoint(&self.owner) {
            return Err(StateError::ForeignResource {
                ent_id: resource.ent_id,
                owner: self.owner.clone(),
            });
        }
        if self.entries.contains_key(&resource.ent_id) {
            return Err(StateError::DuplicateEntId(resource.ent_id));
        }
        self.entries.insert(resource.ent_id.clone(), resource);
        Ok(())
    }

    /// Removes and returns a live entry. Expired entries stay put for the
    /// next sweep.
    pub fn consume(&mut self, id: &EntId, now: f64) -> Result<EntanglementResource, StateError> {
        let entry = self
            .entries
            .get(id)
            .ok_or_else(|| StateError::NotFound(id.clone()))?;
        if entry.is_expired(now) {
            return Err(StateError::Expired {
                ent_id: id.clone(),
                expires_at: entry.expires_at,
            });
        }
        Ok(self.entries.remove(id).expect("checked above"))
    }

    /// Drops an entry regardless of expiry; used when a half is relabeled.
    pub fn discard(&mut self, id: &EntId) -> Option<EntanglementResource> {
        self.entries.remove(id)
    }

    /// Highest-fidelity live pair shared with `peer` meeting `f_min`; ties go
    /// to the smallest ent_id.
    pub fn best_resource(
        &self,
        peer: &QuantumAddress,
        f_min: f64,
        now: f64,
    ) -> Option<&EntanglementResource> {
        let mut best: Option<(&EntanglementResource, f64)> = None;
        // BTreeMap iteration is ascending by ent_id, so strict > keeps the smallest on ties.
        for r in self.entries.values() {
            if r.is_expired(now) || r.peer_of(&self.owner) != Some(peer) {
                continue;
            }
            let f = r.fidelity_now(now);
            if f < f_min {
                continue;
            }
            if best.is_none_or(|(_, bf)| f > bf) {
                best = Some((r, f));
            }
        }
        best.map(|(r, _)| r)
    }

    /// Removes entries with `expires_at <= now` and decays the survivors up to `now`.
    pub fn decay_sweep(&mut self, now: f64) {
        self.entries.retain(|_, r| !r.is_expired(now));
        for r in self.entries.values_mut() {
            if now > r.fidelity_at {
                r.fidelity = r.fidelity_now(now);
                r.fidelity_at = now;
            }
        }
    }
}

/// Advisory policy knobs. Unknown keys are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Hints {
    #[serde(default)]
    pub allow_parallel_gen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority_class: Option<i64>,
}

impl Hints {
    pub fn from_map(map: &BTreeMap<String, Value>) -> Self {
        Self {
            allow_parallel_gen: map
                .get("allow_parallel_gen")
                .and_then(Value::as_bool)
                .unwrap_or(false),
            priority_class: map.get("priority_class").and_then(Value::as_i64),
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InternalState {
    pub ftc: ClassicalForwardingTable,
    pub ftq: QuantumForwardingTable,
    pub hints: Hints,
    lamport: u64,
}

impl InternalState {
    pub fn new(owner: QuantumAddress, ftc: ClassicalForwardingTable, hints: Hints) -> Self {
        Self {
            ftc,
            ftq: QuantumForwardingTable::new(owner),
            hints,
            lamport: 0,
        }
    }

    pub fn owner(&self) -> &QuantumAddress {
        self.ftq.owner()
    }

    pub fn lamport(&self) -> u64 {
        self.lamport
    }

    /// Local event: advance the clock and return the new value.
    pub fn tick(&mut self) -> u64 {
        self.lamport += 1;
        self.lamport
    }

    /// Receive event carrying the sender's clock value.
    pub fn merge(&mut self, received: u64) -> u64 {
        self.lamport = lamport_merge(self.lamport, received);
        self.lamport
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qa(s: &str) -> QuantumAddress {
        QuantumAddress::new(s).unwrap()
    }

    fn res(id: &str, a: &str, b: &str, f: f64, expires_at: f64) -> EntanglementResource {
        EntanglementResource::new(EntId::from(id), [qa(a), qa(b)], f, 0.0, expires_at, None).unwrap()
    }

    #[test]
    fn insert_and_lookup() {
        let mut t = QuantumForwardingTable::new(qa("A"));
        t.insert(res("e_AY", "A", "Y", 0.9, 10.0)).unwrap();
        assert!(t.get(&EntId::from("e_AY")).is_some());
    }

    #[test]
    fn foreign_resource_rejected() {
        let mut t = QuantumForwardingTable::new(qa("A"));
        let err = t.insert(res("e_YB", "Y", "B", 0.9, 10.0)).unwrap_err();
        assert!(matches!(err, StateError::ForeignResource { .. }));
    }

    #[test]
    fn duplicate_ent_id_rejected() {
        let mut t = QuantumForwardingTable::new(qa("A"));
        t.insert(res("e1", "A", "Y", 0.9, 10.0)).unwrap();
        let err = t.insert(res("e1", "A", "Y", 0.8, 10.0)).unwrap_err();
        assert_eq!(err, StateError::DuplicateEntId(EntId::from("e1")));
    }

    #[test]
    fn consume_paths() {
        let mut t = QuantumForwardingTable::new(qa("B"));
        t.insert(res("e_AB", "A", "B", 0.92, 10.0)).unwrap();
        let r = t.consume(&EntId::from("e_AB"), 1.0).unwrap();
        assert_eq!(r.ent_id, EntId::from("e_AB"));
        assert!(t.is_empty());
        assert_eq!(
            t.consume(&EntId::from("nope"), 1.0),
            Err(StateError::NotFound(EntId::from("nope")))
        );
        t.insert(res("e2", "A", "B", 0.92, 10.0)).unwrap();
        assert!(matches!(
            t.consume(&EntId::from("e2"), 10.5),
            Err(StateError::Expired { .. })
        ));
    }

    #[test]
    fn best_resource_argmax() {
        let mut t = QuantumForwardingTable::new(qa("A"));
        t.insert(res("e1", "A", "Y", 0.8, 10.0)).unwrap();
        t.insert(res("e2", "A", "Y", 0.95, 10.0)).unwrap();
        let best = t.best_resource(&qa("Y"), 0.9, 0.0).unwrap();
        assert_eq!(best.ent_id, EntId::from("e2"));
        assert!(t.best_resource(&qa("Y"), 0.96, 0.0).is_none());
        assert!(t.best_resource(&qa("B"), 0.5, 0.0).is_none());
    }

    #[test]
    fn best_resource_tie_is_order_independent() {
        // Both insertion orders must pick the lexicographically smaller id.
        for order in [["x2", "x1"], ["x1", "x2"]] {
            let mut t = QuantumForwardingTable::new(qa("A"));
            for id in order {
                t.insert(res(id, "A", "Y", 0.9, 10.0)).unwrap();
            }
            assert_eq!(t.best_resource(&qa("Y"), 0.9, 0.0).unwrap().ent_id, EntId::from("x1"));
        }
    }

    #[test]
    fn sweep_removes_at_deadline() {
        let mut t = QuantumForwardingTable::new(qa("A"));
        t.insert(res("e1", "A", "Y", 0.9, 10.0)).unwrap();
        t.decay_sweep(10.0);
        assert!(t.is_empty());
    }

    #[test]
    fn sweep_without_decay_keeps_fidelity() {
        let mut t = QuantumForwardingTable::new(qa("A"));
        t.insert(res("e1", "A", "Y", 1.0, 1e9)).unwrap();
        t.decay_sweep(123.0);
        assert_eq!(t.get(&EntId::from("e1")).unwrap().fidelity, 1.0);
    }

    #[test]
    fn sweep_decays_one_time_constant() {
        let mut t = QuantumForwardingTable::new(qa("A"));
        let r = EntanglementResource::new(EntId::from("e1"), [qa("A"), qa("Y")], 0.9, 0.0, 100.0, Some(0.5))
            .unwrap();
        t.insert(r).unwrap();
        // Two sweeps adding up to one time constant equal a single sweep.
        t.decay_sweep(0.2);
        t.decay_sweep(0.5);
        let f = t.get(&EntId::from("e1")).unwrap().fidelity;
        assert!((f - 0.48912163676143754).abs() < 1e-12, "{f}");
    }

    #[test]
    fn ftc_neighbor_check() {
        let mut ftc = ClassicalForwardingTable::default();
        ftc.next_hop.insert(qa("B"), qa("Y"));
        let n: BTreeSet<_> = [qa("Y")].into_iter().collect();
        assert!(ftc.validate(&qa("A"), &n).is_ok());
        ftc.next_hop.insert(qa("C"), qa("Z"));
        assert!(ftc.validate(&qa("A"), &n).is_err());
    }

    #[test]
    fn hints_ignore_unknown_keys() {
        let mut m = BTreeMap::new();
        m.insert("allow_parallel_gen".into(), Value::Bool(true));
        m.insert("colour".into(), Value::from("blue"));
        let h = Hints::from_map(&m);
        assert!(h.allow_parallel_gen);
        assert!(Hints::from_map(&BTreeMap::new()).is_empty());
    }

    #[test]
    fn lamport_is_non_decreasing() {
        let mut s = InternalState::new(qa("A"), Default::default(), Hints::default());
        assert_eq!(s.tick(), 1);
        assert_eq!(s.merge(7), 8);
        assert_eq!(s.merge(3), 9);
    }
}
