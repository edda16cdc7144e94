//! JSON-lines run trace and the summary derived from it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{Disposition, MeP, PoA};
use crate::mp::MpKind;
use crate::sim::HeaderId;
use crate::types::{ActionKind, EntanglementResource, Outcome, QuantumAddress, ServiceIntent, Stamp};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Submit {
        at: f64,
        header: HeaderId,
        node: QuantumAddress,
        intent: ServiceIntent,
    },
    Stamp {
        at: f64,
        header: HeaderId,
        writer: QuantumAddress,
        stamp: Stamp,
    },
    Commit {
        at: f64,
        header: HeaderId,
        node: QuantumAddress,
        action: ActionKind,
        outcome: Outcome,
        retries: u32,
    },
    Transfer {
        at: f64,
        header: HeaderId,
        from: QuantumAddress,
        to: QuantumAddress,
    },
    Abort {
        at: f64,
        header: HeaderId,
        node: QuantumAddress,
        action: ActionKind,
        reason: String,
        pre_ftq: Vec<EntanglementResource>,
        post_ftq: Vec<EntanglementResource>,
    },
    Outcome {
        at: f64,
        header: HeaderId,
        node: QuantumAddress,
        disposition: Disposition,
    },
    Plan {
        at: f64,
        header: HeaderId,
        node: QuantumAddress,
        poa: PoA,
    },
    Select {
        at: f64,
        header: HeaderId,
        node: QuantumAddress,
        round: u32,
        selected: Vec<ActionKind>,
        skipped: Vec<ActionKind>,
    },
    Schedule {
        at: f64,
        header: HeaderId,
        node: QuantumAddress,
        round: u32,
        meps: Vec<MeP>,
    },
    Retry {
        at: f64,
        header: HeaderId,
        node: QuantumAddress,
        action: ActionKind,
        mp: MpKind,
        attempt: u32,
    },
    Signal {
        at: f64,
        header: HeaderId,
        src: QuantumAddress,
        dst: QuantumAddress,
        signal: String,
        deliver_at: f64,
    },
    Local {
        at: f64,
        header: HeaderId,
        node: QuantumAddress,
        action: ActionKind,
        note: String,
    },
    Ignored {
        at: f64,
        node: QuantumAddress,
        reason: String,
    },
}

impl TraceRecord {
    pub fn header(&self) -> Option<HeaderId> {
        match self {
            TraceRecord::Submit { header, .. }
            | TraceRecord::Stamp { header, .. }
            | TraceRecord::Commit { header, .. }
            | TraceRecord::Transfer { header, .. }
            | TraceRecord::Abort { header, .. }
            | TraceRecord::Outcome { header, .. }
            | TraceRecord::Plan { header, .. }
            | TraceRecord::Select { header, .. }
            | TraceRecord::Schedule { header, .. }
            | TraceRecord::Retry { header, .. }
            | TraceRecord::Signal { header, .. }
            | TraceRecord::Local { header, .. } => Some(*header),
            TraceRecord::Ignored { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
    verbose: bool,
}

impl Trace {
    pub fn new(verbose: bool) -> Self {
        Self {
            records: Vec::new(),
            verbose,
        }
    }

    pub fn verbose(&self) -> bool {
        self.verbose
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    /// Records only kept in verbose mode; the closure is not run otherwise.
    pub fn debug(&mut self, record: impl FnOnce() -> TraceRecord) {
        if self.verbose {
            self.records.push(record());
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stamps of one header in append order, with their writers.
    pub fn stamp_log(&self, header: HeaderId) -> Vec<(&QuantumAddress, &Stamp)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Stamp {
                    header: h, writer, stamp, ..
                } if *h == header => Some((writer, stamp)),
                _ => None,
            })
            .collect()
    }

    pub fn headers(&self) -> Vec<HeaderId> {
        let mut hs: Vec<HeaderId> = self.records.iter().filter_map(TraceRecord::header).collect();
        hs.sort_unstable();
        hs.dedup();
        hs
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(line).map_err(|source| TraceError::Parse { line: i + 1, source })?;
            records.push(r);
        }
        Ok(Self {
            records,
            verbose: false,
        })
    }

    pub fn read(path: &Path) -> Result<Self, TraceError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), TraceError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderSummary {
    pub header: HeaderId,
    pub participants: Vec<QuantumAddress>,
    pub stamps: usize,
    pub failed_stamps: usize,
    pub retries: u32,
    pub outcome: Option<Disposition>,
    pub submitted_at: f64,
    pub finished_at: Option<f64>,
    pub latency: Option<f64>,
    /// From the last SWAP stamp, or the link stamp on a single hop.
    pub final_fidelity: Option<f64>,
    /// At the moment of consumption, after decay.
    pub consumed_fidelity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub headers: Vec<HeaderSummary>,
    pub delivered: usize,
    pub dropped: usize,
    pub records: usize,
}

fn meta_f64(s: &Stamp, key: &str) -> Option<f64> {
    s.meta.get(key).and_then(serde_json::Value::as_f64)
}

pub fn summarize(trace: &Trace) -> RunSummary {
    let mut by: BTreeMap<HeaderId, HeaderSummary> = BTreeMap::new();
    let mut ranks: BTreeMap<HeaderId, u8> = BTreeMap::new();
    for r in trace.records() {
        match r {
            TraceRecord::Submit {
                at, header, intent, ..
            } => {
                by.insert(
                    *header,
                    HeaderSummary {
                        header: *header,
                        participants: intent.participants().to_vec(),
                        stamps: 0,
                        failed_stamps: 0,
                        retries: 0,
                        outcome: None,
                        submitted_at: *at,
                        finished_at: None,
                        latency: None,
                        final_fidelity: None,
                        consumed_fidelity: None,
                    },
                );
            }
            TraceRecord::Stamp { header, stamp, .. } => {
                if let Some(h) = by.get_mut(header) {
                    h.stamps += 1;
                    if stamp.outcome == Outcome::Fail {
                        h.failed_stamps += 1;
                    }
                    let rank = match stamp.action {
                        ActionKind::Swap { .. } => 2,
                        ActionKind::LinkPr { .. } => 1,
                        _ => 0,
                    };
                    let best = ranks.entry(*header).or_insert(0);
                    if rank > 0 && rank >= *best && stamp.outcome == Outcome::Ok {
                        if let Some(f) = meta_f64(stamp, "fidelity") {
                            h.final_fidelity = Some(f);
                            *best = rank;
                        }
                    }
                    if matches!(stamp.action, ActionKind::ConsumeTp { .. }) && stamp.outcome == Outcome::Ok {
                        h.consumed_fidelity = meta_f64(stamp, "fidelity");
                    }
                }
            }
            TraceRecord::Commit { header, retries, .. } => {
                if let Some(h) = by.get_mut(header) {
                    h.retries += retries;
                }
            }
            TraceRecord::Outcome {
                at,
                header,
                disposition,
                ..
            } => {
                if let Some(h) = by.get_mut(header) {
                    if matches!(disposition, Disposition::Deliver | Disposition::Drop) {
                        h.outcome = Some(disposition.clone());
                        h.finished_at = Some(*at);
                        h.latency = Some(at - h.submitted_at);
                    }
                }
            }
            _ => {}
        }
    }
    let headers: Vec<HeaderSummary> = by.into_values().collect();
    RunSummary {
        delivered: headers
            .iter()
            .filter(|h| h.outcome == Some(Disposition::Deliver))
            .count(),
        dropped: headers.iter().filter(|h| h.outcome == Some(Disposition::Drop)).count(),
        headers,
        records: trace.len(),
    }
}
