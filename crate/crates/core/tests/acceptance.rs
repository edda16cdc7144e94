//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; exits nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dkernel::dag::{self, CommitDag};
use dkernel::kernel::Disposition;
use dkernel::mp::{purify_fidelity, swap_fidelity, LinkConfig};
use dkernel::scenario::{RunOptions, Scenario};
use dkernel::trace::TraceRecord;
use dkernel::types::{ActionKind, Link, Outcome, QuantumAddress};

type Check = Result<String, String>;

fn qa(s: &str) -> QuantumAddress {
    QuantumAddress::new(s).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn golden_trace() -> Check {
    let s = common::load("teleport_ayb.json");
    let r = common::run(&s, Some(7), false);
    let log = r.trace.stamp_log(1);
    let (a, y, b) = (qa("A"), qa("Y"), qa("B"));
    let expected = [
        (ActionKind::LinkPr { link: Link::new(a.clone(), y.clone()) }, vec![a.clone(), y.clone()]),
        (ActionKind::ActForward { next_hop: Some(y.clone()) }, vec![a.clone()]),
        (ActionKind::LinkPr { link: Link::new(y.clone(), b.clone()) }, vec![y.clone(), b.clone()]),
        (
            ActionKind::Swap {
                left: a.clone(),
                mid: y.clone(),
                right: b.clone(),
            },
            vec![a.clone(), y.clone(), b.clone()],
        ),
        (ActionKind::ActForward { next_hop: Some(b.clone()) }, vec![y.clone()]),
        (
            ActionKind::ConsumeTp {
                src: a.clone(),
                dst: b.clone(),
            },
            vec![a.clone(), b.clone()],
        ),
        (ActionKind::ActDeliver, vec![b.clone()]),
    ];
    ensure(log.len() == expected.len(), || {
        format!("{} stamps: {:?}", log.len(), common::stamp_labels(&r.trace, 1))
    })?;
    for (i, ((_, st), (kind, support))) in log.iter().zip(&expected).enumerate() {
        ensure(&st.action == kind && &st.support == support && st.outcome == Outcome::Ok, || {
            format!("s{} is {} {:?}", i + 1, st.label(), st.outcome)
        })?;
    }
    let ts: Vec<u64> = log.iter().map(|(_, s)| s.ts).collect();
    ensure(ts.windows(2).all(|w| w[0] < w[1]), || format!("timestamps {ts:?}"))?;
    Ok(format!("7 stamps in order, ts {ts:?}"))
}

fn retry_invisibility() -> Check {
    let s = common::load("teleport_ayb_lossy.json");
    let (mut succeeded, mut with_retries) = (0, 0);
    for seed in 0..100 {
        let r = common::run(&s, Some(seed), true);
        let delivered = r.headers[0].disposition == Some(Disposition::Deliver);
        let stamps = r.trace.stamp_log(1).len();
        if delivered {
            succeeded += 1;
            ensure(stamps == 7, || format!("seed {seed}: {stamps} stamps on success"))?;
        }
        let retries = r
            .trace
            .records()
            .iter()
            .filter(|x| matches!(x, TraceRecord::Retry { .. }))
            .count();
        if retries > 0 {
            with_retries += 1;
        }
    }
    ensure(succeeded > 0, || "no run succeeded".into())?;
    ensure(with_retries >= 30, || format!("only {with_retries}/100 runs retried"))?;
    Ok(format!(
        "{succeeded}/100 delivered with 7 stamps, {with_retries}/100 runs had hidden retries"
    ))
}

fn random_chain(n: usize, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + n as u64);
    let link = LinkConfig {
        p_gen: 1.0,
        f_gen: 0.99,
        tau_budget: 1.0,
        t_coh: None,
        sync_delay: 0.0,
        attempt_time: 1e-4,
    };
    let mut s = Scenario::chain(n, link, 0.005, 0.5, 0.01).unwrap();
    for l in &mut s.quantum_links {
        l.config.p_gen = rng.gen_range(0.5..=1.0);
        l.config.f_gen = rng.gen_range(0.93..=1.0);
        l.config.t_coh = rng.gen_bool(0.5).then(|| rng.gen_range(0.5..5.0));
    }
    for c in &mut s.classical_links {
        c.latency = rng.gen_range(0.001..0.01);
    }
    s.seed = seed;
    s
}

fn dag_guarantees() -> Check {
    let mut delivered = 0;
    for n in 3..=8 {
        for seed in 0..100 {
            let s = random_chain(n, seed);
            let r = common::run(&s, None, false);
            let report = dag::verify(&r.trace);
            ensure(report.all_pass(), || format!("n={n} seed={seed}: {:?}", report.violations))?;
            let d = CommitDag::build_unchecked(&r.trace);
            let brute = !common::brute_force_has_cycle(d.vertices.len(), &common::dag_edges(&d));
            ensure(brute == report.acyclic, || {
                format!("n={n} seed={seed}: oracle acyclic={brute}, verify acyclic={}", report.acyclic)
            })?;
            if r.headers[0].disposition == Some(Disposition::Deliver) {
                delivered += 1;
            }
        }
    }
    Ok(format!("600 chains verified, 0 oracle mismatches, {delivered} delivered"))
}

fn commit_atomicity() -> Check {
    let s = common::load("teleport_forced_abort.json");
    let r = common::run(&s, None, false);
    let log = r.trace.stamp_log(1);
    let failures = log.iter().filter(|(_, st)| st.outcome == Outcome::Fail).count();
    ensure(failures == 1, || format!("{failures} failure stamps"))?;
    ensure(log.last().is_some_and(|(_, st)| st.outcome == Outcome::Fail), || {
        "log does not end in the failure stamp".into()
    })?;
    ensure(
        !log.iter().any(|(_, st)| {
            matches!(st.action, ActionKind::Swap { .. } | ActionKind::ConsumeTp { .. })
        }),
        || "partial SWAP or CONSUME stamp present".into(),
    )?;
    let aborts: Vec<_> = r
        .trace
        .records()
        .iter()
        .filter_map(|x| match x {
            TraceRecord::Abort {
                node, pre_ftq, post_ftq, ..
            } => Some((node, pre_ftq, post_ftq)),
            _ => None,
        })
        .collect();
    ensure(aborts.len() == 1, || format!("{} abort records", aborts.len()))?;
    let (node, pre, post) = aborts[0];
    ensure(pre == post, || format!("FT_q at {node} changed across the abort"))?;
    Ok(format!(
        "one failure stamp {}, FT_q at {node} unchanged ({} entries)",
        log.last().unwrap().1.label(),
        pre.len()
    ))
}

fn fidelity_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pairs: Vec<(f64, f64)> = (0..20)
        .map(|_| (rng.gen_range(0.25..=1.0), rng.gen_range(0.25..=1.0)))
        .collect();
    pairs.push((1.0, 1.0));
    pairs.push((0.25, 0.25));
    let mut worst = 0.0f64;
    for &(f1, f2) in &pairs {
        let (f, p) = purify_fidelity(f1, f2).map_err(|e| e.to_string())?;
        let (op, of) = common::oracle_purify(f1, f2);
        let sw = swap_fidelity(f1, f2).map_err(|e| e.to_string())?;
        let osw = common::oracle_swap(f1, f2);
        for (got, want, what) in [(p, op, "p_succ"), (f, of, "purify"), (sw, osw, "swap")] {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure(err <= 1e-12, || format!("{what}({f1}, {f2}) = {got}, oracle {want}"))?;
        }
    }
    Ok(format!("22 pairs, max abs error {worst:.1e}"))
}

fn committed_multiset(trace: &dkernel::Trace) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for (_, st) in trace.stamp_log(1) {
        *m.entry(format!("{} {:?}", st.label(), st.outcome)).or_insert(0) += 1;
    }
    m
}

fn hints_neutrality() -> Check {
    let s = common::load("teleport_two_branch.json");
    let run = |no_hints| {
        s.run(RunOptions {
            seed: None,
            verbose: false,
            no_hints,
        })
        .map_err(|e| e.to_string())
    };
    let (on, off) = (run(false)?, run(true)?);
    let (m_on, m_off) = (committed_multiset(&on.trace), committed_multiset(&off.trace));
    ensure(m_on == m_off, || format!("multisets differ: {m_on:?} vs {m_off:?}"))?;
    let depth = |t: &dkernel::Trace| {
        let d = CommitDag::build_unchecked(t);
        common::longest_path(d.vertices.len(), &common::dag_edges(&d))
    };
    let (l_on, l_off) = (depth(&on.trace), depth(&off.trace));
    ensure(l_on < l_off, || format!("longest path {l_on} with hints, {l_off} without"))?;
    Ok(format!(
        "{} committed actions either way, longest path {l_on} vs {l_off}",
        m_on.values().sum::<usize>()
    ))
}

fn determinism() -> Check {
    let bin = env!("CARGO_BIN_EXE_dkernel");
    let names = [
        "teleport_ayb.json",
        "teleport_ayb_lossy.json",
        "teleport_two_branch.json",
        "teleport_forced_abort.json",
        "chain_n.json",
    ];
    for name in names {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let status = Command::new(bin)
                .arg("run")
                .arg(common::scenario_path(name))
                .args(["--seed", "7", "--out-dir"])
                .arg(dir.path())
                .output()
                .map_err(|e| e.to_string())?;
            ensure(status.status.success(), || format!("{name}: exit {}", status.status))?;
            let read = |f: &str| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string());
            outputs.push((read("trace.jsonl")?, read("dag.dot")?));
        }
        ensure(outputs[0] == outputs[1], || format!("{name}: outputs differ"))?;
    }
    Ok(format!("{} scenarios byte-identical across two runs", names.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 7] = [
        ("1 golden teleportation trace", golden_trace),
        ("2 retry invisibility", retry_invisibility),
        ("3 emergent-DAG guarantees", dag_guarantees),
        ("4 commit atomicity", commit_atomicity),
        ("5 fidelity oracle equivalence", fidelity_oracle),
        ("6 hints neutrality and concurrency", hints_neutrality),
        ("7 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
