//! Global commit DAG rebuilt from a run trace, and its invariant checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::HeaderId;
use crate::trace::{Trace, TraceRecord};
use crate::types::{ActionKind, EntId, Outcome, QuantumAddress, Stamp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DagError {
    #[error("header {header}: stamp {index} has ts {got} after {last}")]
    NonMonotone {
        header: HeaderId,
        index: usize,
        last: u64,
        got: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub header: HeaderId,
    /// Position in the header's stamp log.
    pub index: usize,
    pub writer: QuantumAddress,
    pub stamp: Stamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DagEdgeTag {
    Sequence,
    Resource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DagEdge {
    pub from: usize,
    pub to: usize,
    pub tag: DagEdgeTag,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommitDag {
    pub vertices: Vec<Vertex>,
    pub edges: BTreeSet<DagEdge>,
}

fn batch_of(s: &Stamp) -> Option<u64> {
    s.meta.get("concurrent_batch").and_then(serde_json::Value::as_u64)
}

/// Groups consecutive stamps that share a `concurrent_batch` tag.
fn groups(ids: &[usize], vertices: &[Vertex]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut last_batch = None;
    for &i in ids {
        let b = batch_of(&vertices[i].stamp);
        match (b, last_batch, out.last_mut()) {
            (Some(b), Some(lb), Some(g)) if b == lb => g.push(i),
            _ => out.push(vec![i]),
        }
        last_batch = b;
    }
    out
}

impl CommitDag {
    /// Builds the DAG, rejecting any header whose log is not strictly increasing.
    pub fn build(trace: &Trace) -> Result<Self, DagError> {
        let dag = Self::build_unchecked(trace);
        let mut last: BTreeMap<HeaderId, u64> = BTreeMap::new();
        for v in &dag.vertices {
            if let Some(&l) = last.get(&v.header) {
                if v.stamp.ts <= l {
                    return Err(DagError::NonMonotone {
                        header: v.header,
                        index: v.index,
                        last: l,
                        got: v.stamp.ts,
                    });
                }
            }
            last.insert(v.header, v.stamp.ts);
        }
        Ok(dag)
    }

    /// Builds without checking timestamps, for diagnosing broken traces.
    pub fn build_unchecked(trace: &Trace) -> Self {
        Self::from_vertices(collect_vertices(trace))
    }

    /// DAG with `ACT_FORWARD` vertices removed and sequence edges bridged over them.
    pub fn collapse_transport(&self) -> Self {
        let kept = self
            .vertices
            .iter()
            .filter(|v| !matches!(v.stamp.action, ActionKind::ActForward { .. }))
            .cloned()
            .collect();
        Self::from_vertices(kept)
    }

    fn from_vertices(vertices: Vec<Vertex>) -> Self {
        let mut edges = BTreeSet::new();
        let mut by_header: BTreeMap<HeaderId, Vec<usize>> = BTreeMap::new();
        for (i, v) in vertices.iter().enumerate() {
            by_header.entry(v.header).or_default().push(i);
        }
        for ids in by_header.values() {
            let gs = groups(ids, &vertices);
            for w in gs.windows(2) {
                for &from in &w[0] {
                    for &to in &w[1] {
                        edges.insert(DagEdge {
                            from,
                            to,
                            tag: DagEdgeTag::Sequence,
                        });
                    }
                }
            }
        }
        let mut first: BTreeMap<&EntId, usize> = BTreeMap::new();
        for (i, v) in vertices.iter().enumerate() {
            for id in &v.stamp.ent_ids {
                match first.get(id) {
                    Some(&f) => {
                        edges.insert(DagEdge {
                            from: f,
                            to: i,
                            tag: DagEdgeTag::Resource,
                        });
                    }
                    None => {
                        first.insert(id, i);
                    }
                }
            }
        }
        Self { vertices, edges }
    }

    pub fn count(&self, tag: DagEdgeTag) -> usize {
        self.edges.iter().filter(|e| e.tag == tag).count()
    }

    /// Kahn's algorithm; `None` on a cycle.
    pub fn topo_order(&self) -> Option<Vec<usize>> {
        let n = self.vertices.len();
        let mut indeg = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.edges {
            if e.from >= n || e.to >= n {
                return None;
            }
            succ[e.from].push(e.to);
            indeg[e.to] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topo_order().is_some()
    }

    /// Vertices Kahn's algorithm can order; the rest lie on or behind a cycle.
    fn topo_order_partial(&self) -> Vec<usize> {
        let n = self.vertices.len();
        let mut indeg = vec![0usize; n];
        for e in &self.edges {
            indeg[e.to] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::new();
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for e in self.edges.iter().filter(|e| e.from == i) {
                indeg[e.to] -= 1;
                if indeg[e.to] == 0 {
                    ready.insert(e.to);
                }
            }
        }
        order
    }

    /// Graphviz text. Deterministic for a given DAG.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph commit_dag {\n");
        if !self.vertices.is_empty() {
            out.push_str("  rankdir=LR;\n  node [shape=box, fontname=\"monospace\"];\n");
        }
        for (i, v) in self.vertices.iter().enumerate() {
            let support: Vec<&str> = v.stamp.support.iter().map(QuantumAddress::as_str).collect();
            let fail = if v.stamp.outcome == Outcome::Fail { ", style=dashed, color=red" } else { "" };
            let _ = writeln!(
                out,
                "  v{i} [label=\"h{} {}@{}@T{}\"{fail}];",
                v.header,
                v.stamp.action,
                support.join(","),
                v.stamp.ts
            );
        }
        for e in &self.edges {
            let style = match e.tag {
                DagEdgeTag::Sequence => "solid",
                DagEdgeTag::Resource => "dashed",
            };
            let _ = writeln!(out, "  v{} -> v{} [style={style}];", e.from, e.to);
        }
        out.push_str("}\n");
        out
    }
}

fn collect_vertices(trace: &Trace) -> Vec<Vertex> {
    let mut idx: BTreeMap<HeaderId, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.records() {
        if let TraceRecord::Stamp {
            header, writer, stamp, ..
        } = r
        {
            let i = idx.entry(*header).or_insert(0);
            out.push(Vertex {
                header: *header,
                index: *i,
                writer: writer.clone(),
                stamp: stamp.clone(),
            });
            *i += 1;
        }
    }
    out
}

/// One failed check, with the stamps involved as `(header, index)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stamps: Vec<(HeaderId, usize)>,
}

fn violation(check: &str, detail: impl Into<String>, stamps: Vec<(HeaderId, usize)>) -> Violation {
    Violation {
        check: check.to_string(),
        detail: detail.into(),
        stamps,
    }
}

/// Outcome of every invariant check on one trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub acyclic: bool,
    pub monotone: bool,
    pub single_writer: bool,
    pub commit_bounded: bool,
    pub no_local_leak: bool,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.acyclic && self.monotone && self.single_writer && self.commit_bounded && self.no_local_leak
    }

    pub fn checks(&self) -> [(&'static str, bool); 5] {
        [
            ("acyclic", self.acyclic),
            ("monotone", self.monotone),
            ("single_writer", self.single_writer),
            ("commit_bounded", self.commit_bounded),
            ("no_local_leak", self.no_local_leak),
        ]
    }
}

fn check_acyclic(dag: &CommitDag) -> Vec<Violation> {
    if dag.is_acyclic() {
        return Vec::new();
    }
    let order = dag.topo_order_partial();
    let stuck = (0..dag.vertices.len())
        .filter(|i| !order.contains(i))
        .map(|i| (dag.vertices[i].header, dag.vertices[i].index))
        .collect();
    vec![violation("acyclic", "cycle among the listed stamps", stuck)]
}

fn check_monotone(dag: &CommitDag) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut last: BTreeMap<HeaderId, (usize, u64)> = BTreeMap::new();
    for v in &dag.vertices {
        if let Some(&(li, lt)) = last.get(&v.header) {
            if v.stamp.ts <= lt {
                out.push(violation(
                    "monotone",
                    format!("log order: ts {} follows ts {lt}", v.stamp.ts),
                    vec![(v.header, li), (v.header, v.index)],
                ));
            }
        }
        last.insert(v.header, (v.index, v.stamp.ts));
    }
    for e in &dag.edges {
        let (a, b) = (&dag.vertices[e.from], &dag.vertices[e.to]);
        if a.stamp.ts >= b.stamp.ts {
            out.push(violation(
                "monotone",
                format!("{:?} edge from ts {} to ts {}", e.tag, a.stamp.ts, b.stamp.ts),
                vec![(a.header, a.index), (b.header, b.index)],
            ));
        }
    }
    out
}

/// Replays submissions and transfers: every stamp must come from the
/// current holder, and each transfer must follow the sender's forward stamp.
fn check_single_writer(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut holder: BTreeMap<HeaderId, QuantumAddress> = BTreeMap::new();
    let mut last: BTreeMap<HeaderId, (QuantumAddress, Stamp)> = BTreeMap::new();
    let mut index: BTreeMap<HeaderId, usize> = BTreeMap::new();
    for r in trace.records() {
        match r {
            TraceRecord::Submit { header, node, .. } => {
                if holder.insert(*header, node.clone()).is_some() {
                    out.push(violation("single_writer", format!("header {header} submitted twice"), vec![]));
                }
            }
            TraceRecord::Stamp {
                header, writer, stamp, ..
            } => {
                let i = index.entry(*header).or_insert(0);
                if holder.get(header) != Some(writer) {
                    let h = holder.get(header).map_or("nobody".to_string(), |h| h.to_string());
                    out.push(violation(
                        "single_writer",
                        format!("{writer} appended while {h} held the header"),
                        vec![(*header, *i)],
                    ));
                }
                *i += 1;
                last.insert(*header, (writer.clone(), stamp.clone()));
            }
            TraceRecord::Transfer { header, from, to, .. } => {
                if holder.get(header) != Some(from) {
                    out.push(violation(
                        "single_writer",
                        format!("transfer {from}->{to} by a non-holder"),
                        vec![],
                    ));
                }
                let forwarded = matches!(
                    last.get(header),
                    Some((w, s)) if w == from
                        && s.outcome == Outcome::Ok
                        && matches!(&s.action, ActionKind::ActForward { next_hop: Some(nh) } if nh == to)
                );
                if !forwarded {
                    out.push(violation(
                        "single_writer",
                        format!("transfer {from}->{to} without a matching ACT_FORWARD stamp"),
                        vec![],
                    ));
                }
                holder.insert(*header, to.clone());
            }
            _ => {}
        }
    }
    out
}

/// One commit record per stamp, matching in order.
fn check_commit_bounded(trace: &Trace) -> Vec<Violation> {
    let mut stamps: BTreeMap<HeaderId, Vec<(ActionKind, Outcome)>> = BTreeMap::new();
    let mut commits: BTreeMap<HeaderId, Vec<(ActionKind, Outcome)>> = BTreeMap::new();
    for r in trace.records() {
        match r {
            TraceRecord::Stamp { header, stamp, .. } => {
                stamps
                    .entry(*header)
                    .or_default()
                    .push((stamp.action.clone(), stamp.outcome));
            }
            TraceRecord::Commit {
                header,
                action,
                outcome,
                ..
            } => commits.entry(*header).or_default().push((action.clone(), *outcome)),
            _ => {}
        }
    }
    let headers: BTreeSet<&HeaderId> = stamps.keys().chain(commits.keys()).collect();
    let mut out = Vec::new();
    for h in headers {
        let (s, c) = (
            stamps.get(h).map_or(&[][..], Vec::as_slice),
            commits.get(h).map_or(&[][..], Vec::as_slice),
        );
        if s != c {
            let first = s.iter().zip(c).position(|(a, b)| a != b).unwrap_or(s.len().min(c.len()));
            out.push(violation(
                "commit_bounded",
                format!("header {h}: {} stamps for {} committed actions", s.len(), c.len()),
                vec![(*h, first)],
            ));
        }
    }
    out
}

fn check_local_leak(dag: &CommitDag) -> Vec<Violation> {
    dag.vertices
        .iter()
        .filter(|v| v.stamp.action.is_local_only())
        .map(|v| {
            violation(
                "no_local_leak",
                format!("{} is local-only", v.stamp.action),
                vec![(v.header, v.index)],
            )
        })
        .collect()
}

/// Checks `dag` (possibly modified) against the trace it came from.
pub fn verify_dag(dag: &CommitDag, trace: &Trace) -> VerifyReport {
    let acyclic = check_acyclic(dag);
    let monotone = check_monotone(dag);
    let single_writer = check_single_writer(trace);
    let commit_bounded = check_commit_bounded(trace);
    let leak = check_local_leak(dag);
    VerifyReport {
        acyclic: acyclic.is_empty(),
        monotone: monotone.is_empty(),
        single_writer: single_writer.is_empty(),
        commit_bounded: commit_bounded.is_empty(),
        no_local_leak: leak.is_empty(),
        violations: [acyclic, monotone, single_writer, commit_bounded, leak].concat(),
    }
}

pub fn verify(trace: &Trace) -> VerifyReport {
    verify_dag(&CommitDag::build_unchecked(trace), trace)
}

/// DOT export straight from a trace.
pub fn export_dot(trace: &Trace, collapse_transport: bool) -> String {
    let dag = CommitDag::build_unchecked(trace);
    if collapse_transport {
        dag.collapse_transport().to_dot()
    } else {
        dag.to_dot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Link, ServiceIntent};

    fn qa(s: &str) -> QuantumAddress {
        QuantumAddress::new(s).unwrap()
    }

    fn push_stamp(t: &mut Trace, writer: &str, stamp: Stamp) {
        t.push(TraceRecord::Stamp {
            at: 0.0,
            header: 1,
            writer: qa(writer),
            stamp: stamp.clone(),
        });
        t.push(TraceRecord::Commit {
            at: 0.0,
            header: 1,
            node: qa(writer),
            action: stamp.action,
            outcome: stamp.outcome,
            retries: 0,
        });
    }

    fn small() -> Trace {
        let mut t = Trace::new(false);
        t.push(TraceRecord::Submit {
            at: 0.0,
            header: 1,
            node: qa("A"),
            intent: ServiceIntent::teleport(qa("A"), qa("Y"), 0.9, 0.0).unwrap(),
        });
        push_stamp(
            &mut t,
            "A",
            Stamp::ok(
                ActionKind::LinkPr {
                    link: Link::new(qa("A"), qa("Y")),
                },
                vec![qa("A"), qa("Y")],
                1,
            )
            .with_ent_ids(["e1".into()]),
        );
        push_stamp(
            &mut t,
            "A",
            Stamp::ok(
                ActionKind::ActForward {
                    next_hop: Some(qa("Y")),
                },
                vec![qa("A")],
                2,
            ),
        );
        t.push(TraceRecord::Transfer {
            at: 0.0,
            header: 1,
            from: qa("A"),
            to: qa("Y"),
        });
        push_stamp(
            &mut t,
            "Y",
            Stamp::ok(
                ActionKind::ConsumeTp {
                    src: qa("A"),
                    dst: qa("Y"),
                },
                vec![qa("A"), qa("Y")],
                4,
            )
            .with_ent_ids(["e1".into()]),
        );
        t
    }

    #[test]
    fn edges_of_small_trace() {
        let dag = CommitDag::build(&small()).unwrap();
        assert_eq!(dag.count(DagEdgeTag::Sequence), 2);
        assert_eq!(dag.count(DagEdgeTag::Resource), 1);
        assert!(verify(&small()).all_pass());
    }

    #[test]
    fn empty_trace() {
        let t = Trace::new(false);
        let dag = CommitDag::build(&t).unwrap();
        assert!(dag.vertices.is_empty());
        assert_eq!(dag.to_dot(), "digraph commit_dag {\n}\n");
        assert!(verify(&t).all_pass());
    }

    #[test]
    fn build_rejects_non_monotone() {
        let mut t = small();
        push_stamp(&mut t, "Y", Stamp::ok(ActionKind::ActDeliver, vec![qa("Y")], 4));
        assert!(matches!(
            CommitDag::build(&t),
            Err(DagError::NonMonotone { index: 3, last: 4, got: 4, .. })
        ));
        let r = verify(&t);
        assert!(!r.monotone);
        let v = r.violations.iter().find(|v| v.check == "monotone").unwrap();
        assert_eq!(v.stamps, [(1, 2), (1, 3)]);
    }

    #[test]
    fn back_edge_detected() {
        let t = small();
        let mut dag = CommitDag::build(&t).unwrap();
        dag.edges.insert(DagEdge {
            from: 2,
            to: 0,
            tag: DagEdgeTag::Sequence,
        });
        let r = verify_dag(&dag, &t);
        assert!(!r.acyclic);
        assert!(r.violations.iter().any(|v| v.check == "acyclic"));
    }

    #[test]
    fn violations_empty_iff_all_pass() {
        let r = verify(&small());
        assert!(r.all_pass() && r.violations.is_empty());
    }

    #[test]
    fn foreign_writer_detected() {
        let mut t = small();
        push_stamp(&mut t, "A", Stamp::ok(ActionKind::ActDeliver, vec![qa("A")], 9));
        assert!(!verify(&t).single_writer);
    }

    #[test]
    fn transfer_without_forward_detected() {
        let mut t = small();
        t.push(TraceRecord::Transfer {
            at: 0.0,
            header: 1,
            from: qa("Y"),
            to: qa("B"),
        });
        assert!(!verify(&t).single_writer);
    }

    #[test]
    fn local_leak_detected() {
        let mut t = small();
        push_stamp(&mut t, "Y", Stamp::ok(ActionKind::ActHold, vec![qa("Y")], 9));
        let r = verify(&t);
        assert!(!r.no_local_leak);
        assert!(r.commit_bounded);
    }

    #[test]
    fn missing_commit_detected() {
        let mut t = small();
        t.push(TraceRecord::Stamp {
            at: 0.0,
            header: 1,
            writer: qa("Y"),
            stamp: Stamp::ok(ActionKind::ActDeliver, vec![qa("Y")], 9),
        });
        assert!(!verify(&t).commit_bounded);
    }

    #[test]
    fn batch_members_are_unordered() {
        let mut t = small();
        let mk = |ts, b: &str| {
            Stamp::ok(
                ActionKind::LinkPr {
                    link: Link::new(qa("Y"), qa(b)),
                },
                vec![qa("Y"), qa(b)],
                ts,
            )
            .with_meta("concurrent_batch", 5)
        };
        push_stamp(&mut t, "Y", mk(5, "B"));
        push_stamp(&mut t, "Y", mk(6, "C"));
        push_stamp(&mut t, "Y", Stamp::ok(ActionKind::ActDeliver, vec![qa("Y")], 7));
        let dag = CommitDag::build(&t).unwrap();
        let seq: Vec<(usize, usize)> = dag
            .edges
            .iter()
            .filter(|e| e.tag == DagEdgeTag::Sequence)
            .map(|e| (e.from, e.to))
            .collect();
        assert_eq!(seq, [(0, 1), (1, 2), (2, 3), (2, 4), (3, 5), (4, 5)]);
    }

    #[test]
    fn collapse_hides_forwards() {
        let dag = CommitDag::build(&small()).unwrap().collapse_transport();
        assert_eq!(dag.vertices.len(), 2);
        assert_eq!(dag.count(DagEdgeTag::Sequence), 1);
        assert!(!dag.to_dot().contains("ACT_FORWARD"));
    }
}
