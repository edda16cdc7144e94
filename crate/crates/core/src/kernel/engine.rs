use std::collections::BTreeSet;

use serde_json::json;

use super::executor::{link_step_ids, qualifying_pair, superseded_ids, BindContext};
use super::{
    map_and_bind, plan_poa, schedule, select_feasible, ActionId, Disposition, Effect, Hold, KernelError,
    KernelOutcome, MeP, MepBody, NodeCtx, Parked, PlanContext, PoA, Signal,
};
use crate::mp::{
    invoke_fw, ClassicalNet, invoke_gen, invoke_qp, invoke_sig, invoke_syn, BsmBits, MpContext, MpKind, Pauli, QpInput,
};
use crate::sim::HeaderId;
use crate::trace::TraceRecord;
use crate::types::{ActionKind, EntId, Link, QuantumAddress, QuantumPacket, Stamp};

fn support_of(action: &ActionKind, node: &QuantumAddress) -> Vec<QuantumAddress> {
    match action {
        ActionKind::LinkPr { link }
        | ActionKind::Syn { link }
        | ActionKind::Gen { link }
        | ActionKind::Purify { link } => vec![link.0.clone(), link.1.clone()],
        ActionKind::Swap { left, mid, right } => vec![left.clone(), mid.clone(), right.clone()],
        ActionKind::ConsumeTp { src, dst } => vec![src.clone(), dst.clone()],
        _ => vec![node.clone()],
    }
}

fn stamp_kind(action: &ActionKind) -> ActionKind {
    match action {
        ActionKind::Syn { link } | ActionKind::Gen { link } | ActionKind::Purify { link } => {
            ActionKind::LinkPr { link: link.clone() }
        }
        k => k.clone(),
    }
}

fn mp_ctx<'c>(ctx: &'c mut NodeCtx<'_>, now: f64) -> MpContext<'c> {
    MpContext {
        now,
        qp_time: ctx.params.qp_time,
        ids: ctx.ids,
        rng: ctx.rng,
    }
}

/// Appends a stamp as the holder and records the commit. Ticks the clock.
fn commit(
    ctx: &mut NodeCtx<'_>,
    header: HeaderId,
    packet: &mut QuantumPacket,
    build: impl FnOnce(u64) -> Stamp,
    retries: u32,
) -> u64 {
    let ts = ctx.state.tick();
    let stamp = build(ts);
    let (action, outcome) = (stamp.action.clone(), stamp.outcome);
    match packet.header.append_stamp(&ctx.addr, stamp.clone()) {
        Ok(()) => {
            ctx.trace.push(TraceRecord::Stamp {
                at: ctx.now,
                header,
                writer: ctx.addr.clone(),
                stamp,
            });
            ctx.trace.push(TraceRecord::Commit {
                at: ctx.now,
                header,
                node: ctx.addr.clone(),
                action,
                outcome,
                retries,
            });
        }
        Err(e) => ctx.trace.push(TraceRecord::Ignored {
            at: ctx.now,
            node: ctx.addr.clone(),
            reason: format!("stamp rejected: {e}"),
        }),
    }
    ts
}

fn outcome(ctx: &mut NodeCtx<'_>, header: HeaderId, packet: QuantumPacket, disposition: Disposition) -> KernelOutcome {
    ctx.trace.push(TraceRecord::Outcome {
        at: ctx.now,
        header,
        node: ctx.addr.clone(),
        disposition: disposition.clone(),
    });
    KernelOutcome {
        header,
        at: ctx.now,
        disposition,
        packet,
    }
}

/// Failure stamp for `action` followed by a drop.
fn fail(
    ctx: &mut NodeCtx<'_>,
    header: HeaderId,
    mut packet: QuantumPacket,
    action: &ActionKind,
    reason: &str,
    retries: u32,
) -> KernelOutcome {
    let kind = stamp_kind(action);
    let support = support_of(&kind, &ctx.addr);
    let reason = reason.to_string();
    commit(
        ctx,
        header,
        &mut packet,
        |ts| Stamp::failure(kind, support, ts).with_meta("reason", reason),
        retries,
    );
    outcome(ctx, header, packet, Disposition::Drop)
}

fn send(ctx: &mut NodeCtx<'_>, dst: &QuantumAddress, signal: Signal) -> bool {
    let name = signal.name();
    let header = signal.header();
    match invoke_sig(&ctx.addr, dst, signal, ctx.topo, ctx.now) {
        Ok(delivery) => {
            let lamport = ctx.state.tick();
            ctx.trace.debug(|| TraceRecord::Signal {
                at: ctx.now,
                header,
                src: ctx.addr.clone(),
                dst: dst.clone(),
                signal: name.to_string(),
                deliver_at: delivery.at,
            });
            ctx.effects.push(Effect::Signal { delivery, lamport });
            true
        }
        Err(e) => {
            ctx.trace.push(TraceRecord::Ignored {
                at: ctx.now,
                node: ctx.addr.clone(),
                reason: e.to_string(),
            });
            false
        }
    }
}

/// Holder entry point: plan, then run rounds until a terminal disposition
/// or until the packet parks awaiting a classical signal.
pub fn execute(ctx: &mut NodeCtx<'_>, header: HeaderId, packet: QuantumPacket) -> Result<KernelOutcome, KernelError> {
    let (intent, stamps) = packet.read_header();
    let plan_ctx = PlanContext {
        node: &ctx.addr,
        state: ctx.state,
        topo: ctx.topo,
        now: ctx.now,
    };
    let poa = plan_poa(&ctx.kernel.planners, intent, stamps, &plan_ctx)?;
    let done = super::committed_actions(&poa, stamps);
    ctx.trace.debug(|| TraceRecord::Plan {
        at: ctx.now,
        header,
        node: ctx.addr.clone(),
        poa: poa.clone(),
    });
    Ok(run_rounds(ctx, header, packet, poa, done))
}

fn run_rounds(
    ctx: &mut NodeCtx<'_>,
    header: HeaderId,
    mut packet: QuantumPacket,
    poa: PoA,
    mut done: BTreeSet<ActionId>,
) -> KernelOutcome {
    let mut round = 0u32;
    loop {
        let sel = select_feasible(&poa, &done, ctx.state, ctx.topo, ctx.now);
        ctx.trace.debug(|| TraceRecord::Select {
            at: ctx.now,
            header,
            node: ctx.addr.clone(),
            round,
            selected: sel.selected.iter().map(|&i| poa.action(i).kind.clone()).collect(),
            skipped: sel.skipped.iter().map(|&i| poa.action(i).kind.clone()).collect(),
        });
        if sel.selected.is_empty() {
            let pending = poa
                .topo_order()
                .unwrap_or_default()
                .into_iter()
                .find(|id| !done.contains(id) && !poa.action(*id).local_only);
            return match pending {
                Some(id) => {
                    let kind = poa.action(id).kind.clone();
                    fail(ctx, header, packet, &kind, "infeasible", 0)
                }
                None => outcome(ctx, header, packet, Disposition::Drop),
            };
        }
        let bind = BindContext {
            node: &ctx.addr,
            intent: packet.header.intent(),
            state: ctx.state,
            caps: ctx.caps,
            params: ctx.params,
            mapping: ctx.kernel.link_mapping,
            now: ctx.now,
        };
        let meps = match map_and_bind(&sel, &poa, &bind) {
            Ok(m) => schedule(m, &poa),
            Err(e) => {
                let (id, reason) = match &e {
                    KernelError::NoRoute { action, .. } | KernelError::CapabilityMissing { action, .. } => {
                        (*action, e.to_string())
                    }
                    KernelError::Unmapped(id) => (*id, e.to_string()),
                    KernelError::UnsupportedService(_) => (sel.selected[0], e.to_string()),
                };
                let kind = poa.action(id).kind.clone();
                return fail(ctx, header, packet, &kind, &reason, 0);
            }
        };
        done.extend(sel.skipped.iter().copied());
        ctx.trace.debug(|| TraceRecord::Schedule {
            at: ctx.now,
            header,
            node: ctx.addr.clone(),
            round,
            meps: meps.clone(),
        });

        let links = meps.iter().filter(|m| matches!(m.body, MepBody::LinkPrep { .. })).count();
        let batch = (links >= 2).then(|| ctx.state.lamport() + 1);
        let round_start = ctx.now;
        let mut round_end = ctx.now;
        for mep in meps {
            let guards = poa.action(mep.action_id).guards;
            match &mep.body {
                MepBody::LinkPrep { link, reuse } => {
                    let start = if batch.is_some() { round_start } else { ctx.now };
                    let r = run_link_prep(ctx, header, &mut packet, &mep, link, reuse.as_ref(), guards, start, batch);
                    match r {
                        Ok(end) => {
                            round_end = round_end.max(end);
                            if batch.is_none() {
                                ctx.now = end;
                            }
                            done.extend(link_step_ids(&poa, link));
                        }
                        Err(retries) => {
                            ctx.now = ctx.now.max(round_end);
                            return fail_after_abort(ctx, header, packet, &mep.action, retries);
                        }
                    }
                }
                MepBody::Swap { left, right } => {
                    if batch.is_some() {
                        ctx.now = ctx.now.max(round_end);
                    }
                    if let Err(reason) = run_swap(ctx, header, &mut packet, &mep, left, right, guards) {
                        return fail(ctx, header, packet, &mep.action, &reason, 0);
                    }
                }
                MepBody::Forward { next_hop } => {
                    ctx.now = ctx.now.max(round_end);
                    return run_forward(ctx, header, packet, &mep, next_hop);
                }
                MepBody::Consume { src } => {
                    let Some(pair) = qualifying_pair(&ctx.state.ftq, src, &guards, ctx.now).cloned() else {
                        return fail(ctx, header, packet, &mep.action, "no qualifying pair", 0);
                    };
                    let superseded = superseded_ids(packet.header.stamps(), &pair.ent_id);
                    let src = src.clone();
                    if !send(
                        ctx,
                        &src,
                        Signal::ReadyForBsm {
                            header,
                            pair: pair.clone(),
                            superseded,
                        },
                    ) {
                        return fail(ctx, header, packet, &mep.action, "no classical route", 0);
                    }
                    let deadline = ctx.now + mep.timeout;
                    ctx.effects.push(Effect::Timer { at: deadline, header });
                    ctx.soft.parked.insert(
                        header,
                        Parked {
                            packet: packet.clone(),
                            poa: poa.clone(),
                            done: done.clone(),
                            consume: mep.action_id,
                            src,
                            pair: pair.ent_id,
                            deadline,
                        },
                    );
                    return outcome(ctx, header, packet, Disposition::Hold);
                }
                MepBody::Deliver => {
                    let me = ctx.addr.clone();
                    commit(ctx, header, &mut packet, |ts| Stamp::ok(ActionKind::ActDeliver, vec![me], ts), 0);
                    let src = packet.header.intent().source().clone();
                    if src != ctx.addr {
                        send(ctx, &src, Signal::CompletionAck { header });
                    }
                    return outcome(ctx, header, packet, Disposition::Deliver);
                }
                MepBody::Drop => {
                    let me = ctx.addr.clone();
                    commit(ctx, header, &mut packet, |ts| Stamp::ok(ActionKind::ActDrop, vec![me], ts), 0);
                    return outcome(ctx, header, packet, Disposition::Drop);
                }
                MepBody::Hold => {
                    ctx.soft.holds.insert(
                        header,
                        Hold {
                            dst: packet.header.intent().destination().clone(),
                            bsm_done: false,
                        },
                    );
                    ctx.trace.debug(|| TraceRecord::Local {
                        at: ctx.now,
                        header,
                        node: ctx.addr.clone(),
                        action: ActionKind::ActHold,
                        note: "hold installed".into(),
                    });
                    done.insert(mep.action_id);
                }
            }
            if matches!(mep.body, MepBody::Swap { .. }) {
                done.insert(mep.action_id);
            }
        }
        if batch.is_some() {
            ctx.now = ctx.now.max(round_end);
        }
        round += 1;
    }
}

fn fail_after_abort(
    ctx: &mut NodeCtx<'_>,
    header: HeaderId,
    packet: QuantumPacket,
    action: &ActionKind,
    retries: u32,
) -> KernelOutcome {
    fail(ctx, header, packet, action, "retry budget exhausted", retries)
}

/// Pumps GEN attempts through purification until the surviving pair meets
/// the guards. Works on a copy of FT_q that replaces the real one on commit.
///
/// Returns the completion time, or the retry count on abort.
#[allow(clippy::too_many_arguments)]
fn run_link_prep(
    ctx: &mut NodeCtx<'_>,
    header: HeaderId,
    packet: &mut QuantumPacket,
    mep: &MeP,
    link: &Link,
    reuse: Option<&EntId>,
    g: super::Guards,
    start: f64,
    batch: Option<u64>,
) -> Result<f64, u32> {
    let Some(ql) = ctx.topo.quantum_link(&link.0, &link.1) else {
        return Err(0);
    };
    let cfg = ql.config.clone();
    let pre: Vec<_> = ctx.state.ftq.iter().cloned().collect();
    let peer = if link.0 == ctx.addr { link.1.clone() } else { link.0.clone() };
    let mut working = ctx.state.ftq.clone();
    let mut t = start;
    let mut retries = 0u32;
    let mut attempts = 0u32;

    let committed = if let Some(id) = reuse {
        if mep.steps.iter().any(|s| s.kind() == MpKind::Syn) {
            t += invoke_syn(&cfg).elapsed;
        }
        t += ctx.params.qp_time;
        working.get(id).cloned()
    } else {
        t += invoke_syn(&cfg).elapsed;
        let mut survivor: Option<EntId> = None;
        loop {
            if attempts >= ctx.params.max_attempts {
                break None;
            }
            attempts += 1;
            let r = invoke_gen(link, &cfg, &mut mp_ctx(ctx, t));
            t += r.elapsed;
            let Some(raw) = r.produced else {
                retries += 1;
                ctx.trace.debug(|| TraceRecord::Retry {
                    at: t,
                    header,
                    node: ctx.addr.clone(),
                    action: mep.action.clone(),
                    mp: MpKind::Gen,
                    attempt: attempts,
                });
                if retries > mep.max_retries {
                    break None;
                }
                t += mep.backoff;
                continue;
            };
            let raw_id = raw.ent_id.clone();
            if working.insert(raw).is_err() {
                break None;
            }
            let current = match survivor.take() {
                None => raw_id,
                Some(keep) => {
                    let input = QpInput::Purify {
                        keep: keep.clone(),
                        sacrifice: raw_id.clone(),
                    };
                    match invoke_qp(&input, &mut working, &mut mp_ctx(ctx, t)) {
                        Ok(res) if res.success => {
                            t += res.elapsed;
                            keep
                        }
                        Ok(res) => {
                            t += res.elapsed;
                            retries += 1;
                            ctx.trace.debug(|| TraceRecord::Retry {
                                at: t,
                                header,
                                node: ctx.addr.clone(),
                                action: mep.action.clone(),
                                mp: MpKind::Qp,
                                attempt: attempts,
                            });
                            if retries > mep.max_retries {
                                break None;
                            }
                            t += mep.backoff;
                            continue;
                        }
                        Err(_) => {
                            working.discard(&keep);
                            raw_id
                        }
                    }
                }
            };
            let pair = working.get(&current).cloned();
            if let Some(p) = pair {
                if p.fidelity_now(t) >= g.f_min && p.remaining(t) >= g.tau_min {
                    break Some(p);
                }
            }
            survivor = Some(current);
        }
    };

    let Some(pair) = committed else {
        ctx.trace.push(TraceRecord::Abort {
            at: t,
            header,
            node: ctx.addr.clone(),
            action: mep.action.clone(),
            reason: format!("{} failures in {} attempts", retries, attempts),
            pre_ftq: pre,
            post_ftq: ctx.state.ftq.iter().cloned().collect(),
        });
        ctx.now = ctx.now.max(t);
        return Err(retries);
    };

    ctx.state.ftq = working;
    let saved_now = ctx.now;
    ctx.now = t;
    let kind = mep.action.clone();
    let support = vec![link.0.clone(), link.1.clone()];
    let installed = pair.clone();
    let ts = commit(
        ctx,
        header,
        packet,
        |ts| {
            let mut s = Stamp::ok(kind, support, ts)
                .with_ent_ids([pair.ent_id.clone()])
                .with_meta("fidelity", pair.fidelity_now(t))
                .with_meta("expires_at", pair.expires_at);
            if let Some(b) = batch {
                s = s.with_meta("concurrent_batch", b);
            }
            s
        },
        retries,
    );
    if reuse.is_none() {
        ctx.effects.push(Effect::Install {
            node: peer,
            resource: installed,
            lamport: ts,
        });
    }
    if batch.is_some() {
        ctx.now = saved_now;
    }
    Ok(t)
}

fn run_swap(
    ctx: &mut NodeCtx<'_>,
    header: HeaderId,
    packet: &mut QuantumPacket,
    mep: &MeP,
    left: &QuantumAddress,
    right: &QuantumAddress,
    g: super::Guards,
) -> Result<(), String> {
    let (Some(l), Some(r)) = (
        qualifying_pair(&ctx.state.ftq, left, &g, ctx.now).map(|p| p.ent_id.clone()),
        qualifying_pair(&ctx.state.ftq, right, &g, ctx.now).map(|p| p.ent_id.clone()),
    ) else {
        return Err("swap inputs missing".into());
    };
    let mut working = ctx.state.ftq.clone();
    let input = QpInput::SwapBsm {
        left: l.clone(),
        right: r.clone(),
    };
    let now = ctx.now;
    let res = match invoke_qp(&input, &mut working, &mut mp_ctx(ctx, now)) {
        Ok(res) => res,
        Err(e) => return Err(e.to_string()),
    };
    let (Some(pair), Some(bits)) = (res.produced, res.side_data) else {
        return Err("swap produced nothing".into());
    };
    ctx.state.ftq = working;
    ctx.now += res.elapsed;
    let prior = ctx.soft.frames.remove(&l).unwrap_or_default();
    ctx.soft.frames.remove(&r);
    let frame = prior.combine(bits);
    let kind = mep.action.clone();
    let support = support_of(&kind, &ctx.addr);
    let ids = [l, r.clone(), pair.ent_id.clone()];
    let (f, exp) = (pair.fidelity, pair.expires_at);
    commit(
        ctx,
        header,
        packet,
        |ts| {
            Stamp::ok(kind, support, ts)
                .with_ent_ids(ids)
                .with_meta("fidelity", f)
                .with_meta("expires_at", exp)
        },
        0,
    );
    send(
        ctx,
        right,
        Signal::SwapOutcome {
            header,
            pair,
            superseded: vec![r],
            frame,
        },
    );
    Ok(())
}

fn run_forward(
    ctx: &mut NodeCtx<'_>,
    header: HeaderId,
    mut packet: QuantumPacket,
    mep: &MeP,
    next_hop: &QuantumAddress,
) -> KernelOutcome {
    if ctx.topo.neighbor_latency(&ctx.addr, next_hop).is_none() {
        return fail(ctx, header, packet, &mep.action, "next hop is not a classical neighbor", 0);
    }
    let me = ctx.addr.clone();
    let kind = mep.action.clone();
    let ts = commit(ctx, header, &mut packet, |ts| Stamp::ok(kind, vec![me], ts), 0);
    match invoke_fw(&mut packet.header, &ctx.addr, next_hop, ctx.topo, ctx.now) {
        Ok(at) => {
            ctx.trace.push(TraceRecord::Transfer {
                at: ctx.now,
                header,
                from: ctx.addr.clone(),
                to: next_hop.clone(),
            });
            ctx.effects.push(Effect::Forward {
                at,
                to: next_hop.clone(),
                header,
                packet: packet.clone(),
                lamport: ts,
            });
            outcome(
                ctx,
                header,
                packet,
                Disposition::Forward {
                    next_hop: next_hop.clone(),
                },
            )
        }
        Err(e) => {
            let reason = e.to_string();
            fail(ctx, header, packet, &mep.action, &reason, 0)
        }
    }
}

/// Classical message arrival. Returns an outcome when the signal resumes a
/// parked packet.
pub fn on_classical_signal(
    ctx: &mut NodeCtx<'_>,
    src: &QuantumAddress,
    signal: Signal,
    lamport: u64,
) -> Option<KernelOutcome> {
    ctx.state.merge(lamport);
    let header = signal.header();
    let ignore = |ctx: &mut NodeCtx<'_>, why: &str| {
        ctx.trace.debug(|| TraceRecord::Ignored {
            at: ctx.now,
            node: ctx.addr.clone(),
            reason: format!("{why} from {src}"),
        });
    };
    match signal {
        Signal::SwapOutcome {
            pair,
            superseded,
            frame,
            ..
        } => {
            if !pair.has_endpoint(&ctx.addr) {
                ignore(ctx, "SwapOutcome for a foreign pair");
                return None;
            }
            for id in &superseded {
                ctx.state.ftq.discard(id);
                ctx.soft.frames.remove(id);
            }
            let id = pair.ent_id.clone();
            if ctx.state.ftq.insert(pair).is_ok() {
                ctx.soft.frames.insert(id, frame);
            }
            None
        }
        Signal::ReadyForBsm { pair, superseded, .. } => {
            let Some(hold) = ctx.soft.holds.get(&header).cloned() else {
                ignore(ctx, "stale ReadyForBSM");
                return None;
            };
            if hold.bsm_done || &hold.dst != src {
                ignore(ctx, "duplicate ReadyForBSM");
                return None;
            }
            for id in &superseded {
                ctx.state.ftq.discard(id);
            }
            let ebit = pair.ent_id.clone();
            if !ctx.state.ftq.contains(&ebit) && pair.has_endpoint(&ctx.addr) {
                let _ = ctx.state.ftq.insert(pair);
            }
            let mut mpc = MpContext {
                now: ctx.now,
                qp_time: ctx.params.qp_time,
                ids: ctx.ids,
                rng: ctx.rng,
            };
            let res = match invoke_qp(&QpInput::Bsm { ebit: ebit.clone() }, &mut ctx.state.ftq, &mut mpc) {
                Ok(r) => r,
                Err(e) => {
                    ignore(ctx, &format!("BSM_A impossible: {e}"));
                    return None;
                }
            };
            ctx.state.tick();
            ctx.now += res.elapsed;
            if let Some(h) = ctx.soft.holds.get_mut(&header) {
                h.bsm_done = true;
            }
            ctx.trace.debug(|| TraceRecord::Local {
                at: ctx.now,
                header,
                node: ctx.addr.clone(),
                action: ActionKind::BsmA,
                note: format!("measured {ebit}"),
            });
            let bits = res.side_data.unwrap_or_default();
            send(ctx, src, Signal::BsmOutcome { header, ent_id: ebit, bits });
            None
        }
        Signal::BsmOutcome { ent_id, bits, .. } => {
            let matches = ctx.soft.parked.get(&header).is_some_and(|p| p.pair == ent_id && &p.src == src);
            if !matches {
                ignore(ctx, "unexpected BsmOutcome");
                return None;
            }
            let parked = ctx.soft.parked.remove(&header)?;
            Some(resume_consume(ctx, header, parked, bits))
        }
        Signal::CompletionAck { .. } => {
            if ctx.soft.holds.remove(&header).is_some() {
                ctx.trace.debug(|| TraceRecord::Local {
                    at: ctx.now,
                    header,
                    node: ctx.addr.clone(),
                    action: ActionKind::ActHold,
                    note: "hold released".into(),
                });
            } else {
                ignore(ctx, "CompletionAck without hold");
            }
            None
        }
    }
}

fn resume_consume(ctx: &mut NodeCtx<'_>, header: HeaderId, parked: Parked, bits: BsmBits) -> KernelOutcome {
    let Parked {
        mut packet,
        poa,
        mut done,
        consume,
        src,
        pair,
        ..
    } = parked;
    let action = poa.action(consume).kind.clone();
    let resource = match ctx.state.ftq.consume(&pair, ctx.now) {
        Ok(r) => r,
        Err(e) => return fail(ctx, header, packet, &action, &e.to_string(), 0),
    };
    let frame = ctx.soft.frames.remove(&pair).unwrap_or_default().combine(bits);
    let mut mpc = MpContext {
        now: ctx.now,
        qp_time: ctx.params.qp_time,
        ids: ctx.ids,
        rng: ctx.rng,
    };
    let elapsed = invoke_qp(&QpInput::Pauli { bits: frame }, &mut ctx.state.ftq, &mut mpc)
        .map(|r| r.elapsed)
        .unwrap_or(0.0);
    ctx.now += elapsed;
    let fidelity = resource.fidelity_now(ctx.now);
    let support = vec![src, ctx.addr.clone()];
    let correction = format!("{:?}", Pauli::from_bits(frame));
    commit(
        ctx,
        header,
        &mut packet,
        |ts| {
            Stamp::ok(action, support, ts)
                .with_ent_ids([pair])
                .with_meta("fidelity", fidelity)
                .with_meta("correction", json!(correction))
        },
        0,
    );
    done.insert(consume);
    run_rounds(ctx, header, packet, poa, done)
}

/// Deadline for a parked packet. Returns the failure outcome if it was still waiting.
pub fn on_timer(ctx: &mut NodeCtx<'_>, header: HeaderId) -> Option<KernelOutcome> {
    let expired = ctx.soft.parked.get(&header).is_some_and(|p| ctx.now >= p.deadline);
    if !expired {
        return None;
    }
    let parked = ctx.soft.parked.remove(&header)?;
    let action = parked.poa.action(parked.consume).kind.clone();
    Some(fail(ctx, header, parked.packet, &action, "signal timeout", 0))
}
