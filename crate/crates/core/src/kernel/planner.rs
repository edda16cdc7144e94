use std::collections::BTreeSet;

use super::{ActionId, EdgeTag, Guards, PlanContext, PoA};
use crate::types::{ActionKind, Link, Outcome, QuantumAddress, ServiceIntent, Stamp};

/// Strategy that compiles one service into a local plan.
///
/// Implementations must be pure in `(intent, stamps, ctx)`.
pub trait PlannerStrategy {
    fn plan(&self, intent: &ServiceIntent, stamps: &[Stamp], ctx: &PlanContext<'_>) -> PoA;
}

/// Hop-by-hop teleportation: build the link toward the next hop, swap at
/// intermediates, consume and deliver at the destination.
#[derive(Debug, Clone, Copy, Default)]
pub struct TeleportPlanner;

fn link_stamped(stamps: &[Stamp], link: &Link) -> bool {
    stamps.iter().any(|s| {
        s.outcome == Outcome::Ok
            && matches!(&s.action, ActionKind::LinkPr { link: l } if l.same_endpoints(link))
    })
}

fn last_forwarder(stamps: &[Stamp]) -> Option<&QuantumAddress> {
    stamps
        .iter()
        .rev()
        .find(|s| s.outcome == Outcome::Ok && matches!(s.action, ActionKind::ActForward { .. }))
        .and_then(|s| s.support.first())
}

struct LinkSteps {
    purify: ActionId,
}

fn plan_link(poa: &mut PoA, link: Link, g: Guards) -> LinkSteps {
    let syn = poa.add(ActionKind::Syn { link: link.clone() }, g);
    let gen = poa.add(ActionKind::Gen { link: link.clone() }, g);
    let purify = poa.add(ActionKind::Purify { link }, g);
    poa.edge(syn, gen, EdgeTag::Logical);
    poa.edge(gen, purify, EdgeTag::Logical);
    LinkSteps { purify }
}

impl PlannerStrategy for TeleportPlanner {
    fn plan(&self, intent: &ServiceIntent, stamps: &[Stamp], ctx: &PlanContext<'_>) -> PoA {
        let g = Guards {
            f_min: intent.targets().f_min,
            tau_min: intent.targets().tau_min,
        };
        let src = intent.source();
        let dst = intent.destination();
        let v = ctx.node;
        let mut poa = PoA::default();

        if v == src {
            let nh = ctx.state.ftc.lookup(dst).cloned();
            let prep = nh.as_ref().and_then(|nh| {
                let ql = ctx.topo.quantum_link(v, nh)?;
                let link = Link::new(v.clone(), nh.clone());
                (ql.preparer() == v && !link_stamped(stamps, &link)).then(|| plan_link(&mut poa, link, g))
            });
            let fw = poa.add(ActionKind::ActForward { next_hop: None }, g);
            if let Some(p) = prep {
                poa.edge(p.purify, fw, EdgeTag::Resource);
            }
            poa.add(ActionKind::ActHold, g);
            return poa;
        }

        let from_origin = last_forwarder(stamps) == Some(src);
        // The origin did not prepare its first link; this hop fills the gap.
        let upstream = Link::new(src.clone(), v.clone());
        let fill = from_origin
            && ctx.topo.quantum_link(src, v).is_some()
            && !link_stamped(stamps, &upstream);

        if v == dst {
            let up = fill.then(|| plan_link(&mut poa, upstream, g));
            let consume = poa.add(
                ActionKind::ConsumeTp {
                    src: src.clone(),
                    dst: dst.clone(),
                },
                g,
            );
            let deliver = poa.add(ActionKind::ActDeliver, g);
            if let Some(p) = up {
                poa.edge(p.purify, consume, EdgeTag::Resource);
            }
            poa.edge(consume, deliver, EdgeTag::Logical);
            return poa;
        }

        let nh = match ctx.state.ftc.lookup(dst) {
            Some(nh) if ctx.topo.quantum_link(v, nh).is_some() => nh.clone(),
            Some(_) => {
                poa.add(ActionKind::ActDrop, g);
                return poa;
            }
            None => {
                poa.add(ActionKind::ActForward { next_hop: None }, g);
                return poa;
            }
        };
        let up = fill.then(|| plan_link(&mut poa, upstream, g));
        let downstream = Link::new(v.clone(), nh.clone());
        let down = (!link_stamped(stamps, &downstream)).then(|| plan_link(&mut poa, downstream, g));
        let swap = poa.add(
            ActionKind::Swap {
                left: src.clone(),
                mid: v.clone(),
                right: nh,
            },
            g,
        );
        let fw = poa.add(ActionKind::ActForward { next_hop: None }, g);
        for p in up.iter().chain(down.iter()) {
            poa.edge(p.purify, swap, EdgeTag::Resource);
        }
        poa.edge(swap, fw, EdgeTag::Logical);
        poa
    }
}

/// Actions of `poa` already certified by an `ok` stamp in the header.
///
/// A `LINK_PR` stamp covers the SYN, GEN and PURIFY steps of its link.
pub fn committed_actions(poa: &PoA, stamps: &[Stamp]) -> BTreeSet<ActionId> {
    let mut done = BTreeSet::new();
    for a in &poa.actions {
        let hit = stamps.iter().filter(|s| s.outcome == Outcome::Ok).any(|s| {
            match (&a.kind, &s.action) {
                (
                    ActionKind::Syn { link } | ActionKind::Gen { link } | ActionKind::Purify { link },
                    ActionKind::LinkPr { link: l },
                ) => l.same_endpoints(link),
                (k, sk) => k == sk,
            }
        });
        if hit {
            done.insert(a.id);
        }
    }
    done
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::PlanContext;
    use crate::mp::LinkConfig;
    use crate::sim::Topology;
    use crate::state::{Hints, InternalState};

    fn qa(s: &str) -> QuantumAddress {
        QuantumAddress::new(s).unwrap()
    }

    fn cfg() -> LinkConfig {
        LinkConfig {
            p_gen: 1.0,
            f_gen: 0.97,
            tau_budget: 1.0,
            t_coh: None,
            sync_delay: 0.0,
            attempt_time: 1e-4,
        }
    }

    fn ayb() -> Topology {
        let mut t = Topology::new([qa("A"), qa("Y"), qa("B")]);
        t.add_quantum_link(qa("A"), qa("Y"), cfg(), None).unwrap();
        t.add_quantum_link(qa("Y"), qa("B"), cfg(), None).unwrap();
        t.add_classical_link(qa("A"), qa("Y"), 0.005).unwrap();
        t.add_classical_link(qa("Y"), qa("B"), 0.005).unwrap();
        t.compute_routes();
        t
    }

    fn state(topo: &Topology, node: &str) -> InternalState {
        InternalState::new(qa(node), topo.routes_for(&qa(node)), Hints::default())
    }

    fn intent() -> ServiceIntent {
        ServiceIntent::teleport(qa("A"), qa("B"), 0.9, 0.01).unwrap()
    }

    fn kinds(p: &PoA) -> Vec<String> {
        p.actions.iter().map(|a| a.kind.to_string()).collect()
    }

    #[test]
    fn origin_plan() {
        let topo = ayb();
        let st = state(&topo, "A");
        let a = qa("A");
        let ctx = PlanContext {
            node: &a,
            state: &st,
            topo: &topo,
            now: 0.0,
        };
        let p = TeleportPlanner.plan(&intent(), &[], &ctx);
        assert_eq!(
            kinds(&p),
            ["SYN(A-Y)", "GEN(A-Y)", "PURIFY(A-Y)", "ACT_FORWARD(^)", "ACT_HOLD"]
        );
        assert!(p.is_acyclic());
        assert_eq!(p.edges.len(), 3);
    }

    #[test]
    fn intermediate_plan_skips_stamped_link() {
        let topo = ayb();
        let st = state(&topo, "Y");
        let y = qa("Y");
        let ctx = PlanContext {
            node: &y,
            state: &st,
            topo: &topo,
            now: 0.0,
        };
        let stamps = vec![
            Stamp::ok(
                ActionKind::LinkPr {
                    link: Link::new(qa("A"), qa("Y")),
                },
                vec![qa("A"), qa("Y")],
                1,
            ),
            Stamp::ok(
                ActionKind::ActForward {
                    next_hop: Some(qa("Y")),
                },
                vec![qa("A")],
                2,
            ),
        ];
        let p = TeleportPlanner.plan(&intent(), &stamps, &ctx);
        assert_eq!(
            kinds(&p),
            ["SYN(Y-B)", "GEN(Y-B)", "PURIFY(Y-B)", "SWAP(A-Y-B)", "ACT_FORWARD(^)"]
        );
        assert_eq!(committed_actions(&p, &stamps).len(), 0);
    }

    #[test]
    fn deterministic() {
        let topo = ayb();
        let st = state(&topo, "A");
        let a = qa("A");
        let ctx = PlanContext {
            node: &a,
            state: &st,
            topo: &topo,
            now: 0.0,
        };
        let p1 = TeleportPlanner.plan(&intent(), &[], &ctx);
        let p2 = TeleportPlanner.plan(&intent(), &[], &ctx);
        assert_eq!(p1, p2);
    }

    #[test]
    fn link_pr_commits_its_steps() {
        let topo = ayb();
        let st = state(&topo, "A");
        let a = qa("A");
        let ctx = PlanContext {
            node: &a,
            state: &st,
            topo: &topo,
            now: 0.0,
        };
        let p = TeleportPlanner.plan(&intent(), &[], &ctx);
        let s = Stamp::ok(
            ActionKind::LinkPr {
                link: Link::new(qa("Y"), qa("A")),
            },
            vec![qa("A"), qa("Y")],
            1,
        );
        let done = committed_actions(&p, &[s]);
        assert_eq!(done.len(), 3);
    }
}
