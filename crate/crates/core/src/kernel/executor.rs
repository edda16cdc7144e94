use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ActionId, Edge, EdgeTag, Guards, KernelError, LinkMapping, MeP, MepBody, MpLibrary, PoA};
use crate::mp::{MpInvocation, QpOp};
use crate::sim::{EngineParams, Topology};
use crate::state::{Hints, InternalState, QuantumForwardingTable};
use crate::types::{ActionKind, EntId, EntanglementResource, Link, QuantumAddress, ServiceIntent};

/// Feasible frontier of a PoA for one execution round.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub selected: Vec<ActionId>,
    /// Actions whose effect is already present locally and need no MeP.
    pub skipped: Vec<ActionId>,
}

impl Selection {
    pub fn contains(&self, id: ActionId) -> bool {
        self.selected.contains(&id)
    }

    pub fn is_skipped(&self, id: ActionId) -> bool {
        self.skipped.contains(&id)
    }
}

/// Live pair with `peer` meeting both fidelity and lifetime guards.
pub(crate) fn qualifying_pair<'t>(
    ftq: &'t QuantumForwardingTable,
    peer: &QuantumAddress,
    g: &Guards,
    now: f64,
) -> Option<&'t EntanglementResource> {
    let mut best: Option<(&EntanglementResource, f64)> = None;
    for r in ftq.iter() {
        if r.is_expired(now) || r.peer_of(ftq.owner()) != Some(peer) || r.remaining(now) < g.tau_min {
            continue;
        }
        let f = r.fidelity_now(now);
        if f >= g.f_min && best.is_none_or(|(_, bf)| f > bf) {
            best = Some((r, f));
        }
    }
    best.map(|(r, _)| r)
}

fn far_end<'l>(link: &'l Link, node: &QuantumAddress) -> &'l QuantumAddress {
    if &link.0 == node {
        &link.1
    } else {
        &link.0
    }
}

/// Edges serializing generation across links when parallel generation is
/// not allowed: each link waits for the previous link's PURIFY.
pub fn view_induced_edges(poa: &PoA, hints: &Hints) -> BTreeSet<Edge> {
    let mut out = BTreeSet::new();
    if hints.allow_parallel_gen {
        return out;
    }
    let gens: Vec<&Link> = poa
        .actions
        .iter()
        .filter_map(|a| match &a.kind {
            ActionKind::Gen { link } => Some(link),
            _ => None,
        })
        .collect();
    for w in gens.windows(2) {
        let from = poa.find(|k| matches!(k, ActionKind::Purify { link } if link == w[0]));
        let to = poa.find(|k| matches!(k, ActionKind::Syn { link } if link == w[1]));
        if let (Some(from), Some(to)) = (from, to) {
            out.insert(Edge {
                from,
                to,
                tag: EdgeTag::ViewInduced,
            });
        }
    }
    out
}

/// Actions whose predecessors are all done (or selected/skipped this round)
/// and whose guards hold against the current FT_q.
pub fn select_feasible(
    poa: &PoA,
    done: &BTreeSet<ActionId>,
    state: &InternalState,
    topo: &Topology,
    now: f64,
) -> Selection {
    let mut edges = poa.edges.clone();
    edges.extend(view_induced_edges(poa, &state.hints));
    let mut sel = Selection::default();
    let Some(order) = poa.topo_order_with(&edges) else {
        return sel;
    };
    let owner = state.owner();
    let mut ready = done.clone();
    for id in order {
        if done.contains(&id) {
            continue;
        }
        if edges.iter().any(|e| e.to == id && !ready.contains(&e.from)) {
            continue;
        }
        let a = poa.action(id);
        let have = |peer: &QuantumAddress| qualifying_pair(&state.ftq, peer, &a.guards, now).is_some();
        let verdict = match &a.kind {
            ActionKind::Syn { link } => topo.quantum_link(&link.0, &link.1).map(|_| true),
            ActionKind::Gen { link } | ActionKind::Purify { link } => {
                if have(far_end(link, owner)) {
                    Some(false)
                } else if matches!(a.kind, ActionKind::Gen { .. }) {
                    Some(true)
                } else {
                    None
                }
            }
            ActionKind::Swap { left, right, .. } => (have(left) && have(right)).then_some(true),
            ActionKind::ConsumeTp { src, .. } => have(src).then_some(true),
            ActionKind::LinkPr { .. } | ActionKind::BsmA => None,
            ActionKind::ActForward { .. }
            | ActionKind::ActDeliver
            | ActionKind::ActDrop
            | ActionKind::ActHold => Some(true),
        };
        match verdict {
            Some(true) => sel.selected.push(id),
            Some(false) => sel.skipped.push(id),
            None => continue,
        }
        ready.insert(id);
    }
    sel
}

/// Inputs that binding consults besides the selection.
pub struct BindContext<'a> {
    pub node: &'a QuantumAddress,
    pub intent: &'a ServiceIntent,
    pub state: &'a InternalState,
    pub caps: &'a MpLibrary,
    pub params: &'a EngineParams,
    pub mapping: LinkMapping,
    pub now: f64,
}

fn require(ctx: &BindContext<'_>, steps: &[MpInvocation], action: ActionId) -> Result<(), KernelError> {
    for s in steps {
        if !ctx.caps.has(s.kind()) {
            return Err(KernelError::CapabilityMissing {
                node: ctx.node.clone(),
                mp: s.kind(),
                action,
            });
        }
    }
    Ok(())
}

/// Binds each selected action to an executable MeP. SYN/GEN/PURIFY of one
/// link collapse into a single `LINK_PR` MeP.
pub fn map_and_bind(sel: &Selection, poa: &PoA, ctx: &BindContext<'_>) -> Result<Vec<MeP>, KernelError> {
    let mut out = Vec::new();
    let p = ctx.params;
    for &id in &sel.selected {
        let a = poa.action(id);
        let mep = |action: ActionKind, steps: Vec<MpInvocation>, body: MepBody, timeout: f64| MeP {
            action_id: id,
            action,
            steps,
            body,
            max_retries: p.max_retries,
            backoff: p.backoff,
            timeout,
        };
        let m = match &a.kind {
            ActionKind::Syn { link } => {
                let gen = poa.find(|k| matches!(k, ActionKind::Gen { link: l } if l == link));
                let reuse = gen
                    .filter(|g| sel.is_skipped(*g))
                    .and_then(|_| qualifying_pair(&ctx.state.ftq, far_end(link, ctx.node), &a.guards, ctx.now))
                    .map(|r| r.ent_id.clone());
                let purify = MpInvocation::Qp { op: QpOp::Purify };
                let steps = match (&reuse, ctx.mapping) {
                    (Some(_), LinkMapping::Fused) => vec![purify],
                    (Some(_), LinkMapping::Composed) => vec![MpInvocation::Syn { link: link.clone() }, purify],
                    (None, _) => vec![
                        MpInvocation::Syn { link: link.clone() },
                        MpInvocation::Gen { link: link.clone() },
                        purify,
                    ],
                };
                mep(
                    ActionKind::LinkPr { link: link.clone() },
                    steps,
                    MepBody::LinkPrep {
                        link: link.clone(),
                        reuse,
                    },
                    0.0,
                )
            }
            ActionKind::Gen { .. } | ActionKind::Purify { .. } => continue,
            ActionKind::Swap { left, right, .. } => mep(
                a.kind.clone(),
                vec![
                    MpInvocation::Qp { op: QpOp::SwapBsm },
                    MpInvocation::Sig {
                        dst: right.clone(),
                        what: "SwapOutcome".into(),
                    },
                ],
                MepBody::Swap {
                    left: left.clone(),
                    right: right.clone(),
                },
                0.0,
            ),
            ActionKind::ActForward { next_hop } => {
                let nh = match next_hop {
                    Some(nh) => nh.clone(),
                    None => ctx
                        .state
                        .ftc
                        .lookup(ctx.intent.destination())
                        .cloned()
                        .ok_or_else(|| KernelError::NoRoute {
                            node: ctx.node.clone(),
                            dst: ctx.intent.destination().clone(),
                            action: id,
                        })?,
                };
                mep(
                    ActionKind::ActForward {
                        next_hop: Some(nh.clone()),
                    },
                    vec![MpInvocation::Fw { next_hop: nh.clone() }],
                    MepBody::Forward { next_hop: nh },
                    0.0,
                )
            }
            ActionKind::ConsumeTp { src, .. } => mep(
                a.kind.clone(),
                vec![
                    MpInvocation::Sig {
                        dst: src.clone(),
                        what: "ReadyForBSM".into(),
                    },
                    MpInvocation::Qp { op: QpOp::Pauli },
                ],
                MepBody::Consume { src: src.clone() },
                p.signal_timeout,
            ),
            ActionKind::ActDeliver => {
                let src = ctx.intent.source();
                let steps = if src != ctx.node {
                    vec![MpInvocation::Sig {
                        dst: src.clone(),
                        what: "CompletionAck".into(),
                    }]
                } else {
                    Vec::new()
                };
                mep(a.kind.clone(), steps, MepBody::Deliver, 0.0)
            }
            ActionKind::ActDrop => mep(a.kind.clone(), Vec::new(), MepBody::Drop, 0.0),
            ActionKind::ActHold => mep(a.kind.clone(), Vec::new(), MepBody::Hold, 0.0),
            ActionKind::LinkPr { .. } | ActionKind::BsmA => return Err(KernelError::Unmapped(id)),
        };
        require(ctx, &m.steps, id)?;
        out.push(m);
    }
    Ok(out)
}

/// Orders MePs along the PoA's topological order, terminal actions last.
pub fn schedule(mut meps: Vec<MeP>, poa: &PoA) -> Vec<MeP> {
    let order = poa.topo_order().unwrap_or_default();
    let pos = |id: ActionId| order.iter().position(|&o| o == id).unwrap_or(usize::MAX);
    meps.sort_by_key(|m| (m.action.is_terminal(), pos(m.action_id)));
    meps
}

/// Link SYN/GEN/PURIFY ids for `link` in `poa`.
pub(crate) fn link_step_ids(poa: &PoA, link: &Link) -> Vec<ActionId> {
    poa.actions
        .iter()
        .filter(|a| match &a.kind {
            ActionKind::Syn { link: l } | ActionKind::Gen { link: l } | ActionKind::Purify { link: l } => l == link,
            _ => false,
        })
        .map(|a| a.id)
        .collect()
}

/// Every pair id mentioned by the header's stamps except `keep`.
pub(crate) fn superseded_ids(stamps: &[crate::types::Stamp], keep: &EntId) -> Vec<EntId> {
    let mut ids: BTreeSet<EntId> = stamps.iter().flat_map(|s| s.ent_ids.iter().cloned()).collect();
    ids.remove(keep);
    ids.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{plan_poa, PlanContext, PlannerRegistry};
    use crate::mp::MpKind;
    use crate::scenario::Scenario;
    use crate::state::ClassicalForwardingTable;
    use crate::types::Stamp;

    fn qa(s: &str) -> QuantumAddress {
        QuantumAddress::new(s).unwrap()
    }

    fn topo() -> Topology {
        Scenario::from_json(include_str!("../../scenarios/teleport_two_branch.json"))
            .unwrap()
            .topology()
            .unwrap()
    }

    fn intent() -> ServiceIntent {
        ServiceIntent::teleport(qa("A"), qa("B"), 0.9, 0.01).unwrap()
    }

    fn at_y(topo: &Topology, parallel: bool) -> (InternalState, PoA) {
        let hints = Hints {
            allow_parallel_gen: parallel,
            ..Hints::default()
        };
        let st = InternalState::new(qa("Y"), topo.routes_for(&qa("Y")), hints);
        let y = qa("Y");
        let stamps = [Stamp::ok(ActionKind::ActForward { next_hop: Some(qa("Y")) }, vec![qa("A")], 1)];
        let ctx = PlanContext {
            node: &y,
            state: &st,
            topo,
            now: 0.0,
        };
        let poa = plan_poa(&PlannerRegistry::default(), &intent(), &stamps, &ctx).unwrap();
        (st, poa)
    }

    fn gens(sel: &Selection, poa: &PoA) -> usize {
        sel.selected
            .iter()
            .filter(|&&id| matches!(poa.action(id).kind, ActionKind::Gen { .. }))
            .count()
    }

    fn pair(id: &str, a: &str, b: &str) -> EntanglementResource {
        EntanglementResource::new(EntId::from(id), [qa(a), qa(b)], 0.97, 0.0, 1.0, None).unwrap()
    }

    fn bind(sel: &Selection, poa: &PoA, st: &InternalState, caps: &MpLibrary, mapping: LinkMapping) -> Result<Vec<MeP>, KernelError> {
        let (y, i, p) = (qa("Y"), intent(), EngineParams::default());
        let ctx = BindContext {
            node: &y,
            intent: &i,
            state: st,
            caps,
            params: &p,
            mapping,
            now: 0.0,
        };
        map_and_bind(sel, poa, &ctx)
    }

    #[test]
    fn parallel_hint_selects_both_gens() {
        let t = topo();
        let (st, poa) = at_y(&t, false);
        assert_eq!(gens(&select_feasible(&poa, &BTreeSet::new(), &st, &t, 0.0), &poa), 1);
        let (st, poa) = at_y(&t, true);
        assert_eq!(gens(&select_feasible(&poa, &BTreeSet::new(), &st, &t, 0.0), &poa), 2);
        assert!(view_induced_edges(&poa, &st.hints).is_empty());
    }

    #[test]
    fn existing_pair_skips_gen_and_reuses() {
        let t = topo();
        let (mut st, poa) = at_y(&t, true);
        st.ftq.insert(pair("p", "A", "Y")).unwrap();
        let sel = select_feasible(&poa, &BTreeSet::new(), &st, &t, 0.0);
        assert_eq!(gens(&sel, &poa), 1);
        assert_eq!(sel.skipped.len(), 2);
        let composed = bind(&sel, &poa, &st, &MpLibrary::default(), LinkMapping::Composed).unwrap();
        let fused = bind(&sel, &poa, &st, &MpLibrary::default(), LinkMapping::Fused).unwrap();
        let reuse = |ms: &[MeP]| {
            ms.iter()
                .find(|m| matches!(&m.body, MepBody::LinkPrep { reuse: Some(_), .. }))
                .map(|m| m.steps.iter().map(MpInvocation::kind).collect::<Vec<_>>())
        };
        assert_eq!(reuse(&composed), Some(vec![MpKind::Syn, MpKind::Qp]));
        assert_eq!(reuse(&fused), Some(vec![MpKind::Qp]));
    }

    #[test]
    fn missing_capability_rejected() {
        let t = topo();
        let (st, poa) = at_y(&t, false);
        let sel = select_feasible(&poa, &BTreeSet::new(), &st, &t, 0.0);
        let caps = MpLibrary([MpKind::Syn, MpKind::Qp, MpKind::Sig, MpKind::Fw].into_iter().collect());
        let err = bind(&sel, &poa, &st, &caps, LinkMapping::Composed).unwrap_err();
        assert!(matches!(err, KernelError::CapabilityMissing { mp: MpKind::Gen, .. }));
    }

    #[test]
    fn forward_without_route_fails() {
        let mut poa = PoA::default();
        let g = Guards {
            f_min: 0.9,
            tau_min: 0.0,
        };
        let fw = poa.add(ActionKind::ActForward { next_hop: None }, g);
        let st = InternalState::new(qa("Y"), ClassicalForwardingTable::default(), Hints::default());
        let sel = Selection {
            selected: vec![fw],
            skipped: vec![],
        };
        let err = bind(&sel, &poa, &st, &MpLibrary::default(), LinkMapping::Composed).unwrap_err();
        assert!(matches!(err, KernelError::NoRoute { .. }));
    }

    #[test]
    fn terminal_scheduled_last() {
        let t = topo();
        let (mut st, poa) = at_y(&t, true);
        st.ftq.insert(pair("p", "A", "Y")).unwrap();
        st.ftq.insert(pair("q", "Y", "B")).unwrap();
        let sel = select_feasible(&poa, &BTreeSet::new(), &st, &t, 0.0);
        let meps = bind(&sel, &poa, &st, &MpLibrary::default(), LinkMapping::Composed).unwrap();
        let order: Vec<&str> = schedule(meps, &poa).iter().map(|m| m.action.name()).collect();
        assert_eq!(order.last(), Some(&"ACT_FORWARD"));
        assert!(order.contains(&"SWAP"));
    }
}
