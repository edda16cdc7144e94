//! JSON scenario files: topology, initial state, intents and engine knobs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::kernel::{LinkMapping, MpLibrary};
use crate::mp::{ClassicalNet, LinkConfig, MpKind};
use crate::sim::{EngineParams, RunReport, SimError, Simulator, Topology};
use crate::state::{ClassicalForwardingTable, Hints};
use crate::types::{EntId, EntanglementResource, QuantumAddress, Service, ServiceIntent};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

fn invalid(path: impl Into<String>, reason: impl ToString) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.into(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumLinkSpec {
    pub a: QuantumAddress,
    pub b: QuantumAddress,
    #[serde(flatten)]
    pub config: LinkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prepared_by: Option<QuantumAddress>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalLinkSpec {
    pub a: QuantumAddress,
    pub b: QuantumAddress,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub service: Service,
    pub participants: Vec<QuantumAddress>,
    pub f_min: f64,
    #[serde(default)]
    pub tau_min: f64,
    /// Defaults to the first participant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<QuantumAddress>,
    #[serde(default)]
    pub submit_at: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub policy: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub payload: Vec<EntId>,
}

impl IntentSpec {
    pub fn intent(&self) -> Result<ServiceIntent, crate::types::TypeError> {
        ServiceIntent::new(
            self.service,
            self.participants.clone(),
            crate::types::Targets {
                f_min: self.f_min,
                tau_min: self.tau_min,
            },
            self.policy.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub nodes: Vec<QuantumAddress>,
    pub quantum_links: Vec<QuantumLinkSpec>,
    pub classical_links: Vec<ClassicalLinkSpec>,
    /// Explicit FT_c per node; fewest-hop routes are computed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routes: Option<BTreeMap<QuantumAddress, ClassicalForwardingTable>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial_ftq: Vec<EntanglementResource>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hints: BTreeMap<QuantumAddress, BTreeMap<String, Value>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub capabilities: BTreeMap<QuantumAddress, Vec<MpKind>>,
    pub intents: Vec<IntentSpec>,
    #[serde(default)]
    pub engine: EngineParams,
    #[serde(default)]
    pub link_mapping: LinkMapping,
}

/// Run-time switches that do not belong in the file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub verbose: bool,
    pub no_hints: bool,
}

fn unit(path: &str, v: f64) -> Result<(), ScenarioError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(path, format!("{v} is outside [0, 1]")));
    }
    Ok(())
}

fn non_negative(path: &str, v: f64) -> Result<(), ScenarioError> {
    if !(v >= 0.0) {
        return Err(invalid(path, format!("{v} must be non-negative")));
    }
    Ok(())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.topology()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario always serializes")
    }

    /// Validates every field and builds the topology.
    pub fn topology(&self) -> Result<Topology, ScenarioError> {
        let known: BTreeSet<&QuantumAddress> = self.nodes.iter().collect();
        if known.len() != self.nodes.len() {
            return Err(invalid("nodes", "duplicate node"));
        }
        let mut topo = Topology::new(self.nodes.iter().cloned());
        for (i, l) in self.quantum_links.iter().enumerate() {
            let p = format!("quantum_links[{i}]");
            unit(&format!("{p}.p_gen"), l.config.p_gen)?;
            if !(crate::types::FIDELITY_FLOOR..=1.0).contains(&l.config.f_gen) {
                return Err(invalid(
                    format!("{p}.f_gen"),
                    format!("{} is outside [0.25, 1]", l.config.f_gen),
                ));
            }
            non_negative(&format!("{p}.tau_budget"), l.config.tau_budget)?;
            non_negative(&format!("{p}.sync_delay"), l.config.sync_delay)?;
            non_negative(&format!("{p}.attempt_time"), l.config.attempt_time)?;
            if let Some(t) = l.config.t_coh {
                if !(t > 0.0) {
                    return Err(invalid(format!("{p}.t_coh"), "must be positive"));
                }
            }
            topo.add_quantum_link(l.a.clone(), l.b.clone(), l.config.clone(), l.prepared_by.clone())
                .map_err(|e| invalid(&p, e))?;
        }
        for (i, l) in self.classical_links.iter().enumerate() {
            let p = format!("classical_links[{i}]");
            non_negative(&format!("{p}.latency"), l.latency)?;
            topo.add_classical_link(l.a.clone(), l.b.clone(), l.latency)
                .map_err(|e| invalid(&p, e))?;
        }
        match &self.routes {
            Some(routes) => {
                for (node, table) in routes {
                    let p = format!("routes.{node}");
                    if !known.contains(node) {
                        return Err(invalid(p, "unknown node"));
                    }
                    if let Some(dst) = table.next_hop.keys().find(|d| !known.contains(d)) {
                        return Err(invalid(p, format!("unknown destination {dst}")));
                    }
                    topo.set_routes(node.clone(), table.clone()).map_err(|e| invalid(&p, e))?;
                }
            }
            None => topo.compute_routes(),
        }
        for (i, r) in self.initial_ftq.iter().enumerate() {
            let p = format!("initial_ftq[{i}]");
            r.validate().map_err(|e| invalid(&p, e))?;
            for e in &r.endpoints {
                if !known.contains(e) {
                    return Err(invalid(format!("{p}.endpoints"), format!("unknown node {e}")));
                }
            }
        }
        for node in self.hints.keys().chain(self.capabilities.keys()) {
            if !known.contains(node) {
                return Err(invalid(format!("hints/capabilities.{node}"), "unknown node"));
            }
        }
        for (i, spec) in self.intents.iter().enumerate() {
            let p = format!("intents[{i}]");
            let intent = spec.intent().map_err(|e| invalid(format!("{p}.participants"), e))?;
            for part in intent.participants() {
                if !known.contains(part) {
                    return Err(invalid(format!("{p}.participants"), format!("unknown node {part}")));
                }
            }
            if let Some(o) = &spec.origin {
                if o != intent.source() {
                    return Err(invalid(format!("{p}.origin"), "origin must be the first participant"));
                }
            }
            non_negative(&format!("{p}.submit_at"), spec.submit_at)?;
            let (s, d) = (intent.source(), intent.destination());
            for (a, b) in [(s, d), (d, s)] {
                if topo.route_latency(a, b).is_none() {
                    return Err(invalid(format!("{p}.participants"), format!("no classical route {a} -> {b}")));
                }
            }
        }
        let e = &self.engine;
        non_negative("engine.backoff", e.backoff)?;
        non_negative("engine.decay_period", e.decay_period)?;
        non_negative("engine.signal_timeout", e.signal_timeout)?;
        non_negative("engine.qp_time", e.qp_time)?;
        Ok(topo)
    }

    /// Builds a ready-to-run simulator with all intents submitted.
    pub fn build(&self, opts: RunOptions) -> Result<Simulator, ScenarioError> {
        let topo = self.topology()?;
        let seed = opts.seed.unwrap_or(self.seed);
        let mut sim = Simulator::new(topo, self.engine.clone(), seed, opts.verbose);
        sim.kernel_mut().link_mapping = self.link_mapping;
        let sim_err = |p: String| move |e: SimError| invalid(p, e);
        if !opts.no_hints {
            for (node, map) in &self.hints {
                sim.set_hints(node, Hints::from_map(map))
                    .map_err(sim_err(format!("hints.{node}")))?;
            }
        }
        for (node, caps) in &self.capabilities {
            sim.set_capabilities(node, MpLibrary(caps.iter().copied().collect()))
                .map_err(sim_err(format!("capabilities.{node}")))?;
        }
        for (i, r) in self.initial_ftq.iter().enumerate() {
            sim.install_resource(r.clone())
                .map_err(sim_err(format!("initial_ftq[{i}]")))?;
        }
        for (i, spec) in self.intents.iter().enumerate() {
            let intent = spec
                .intent()
                .map_err(|e| invalid(format!("intents[{i}].participants"), e))?;
            let origin = intent.source().clone();
            sim.submit_intent(&origin, intent, spec.payload.iter().cloned().collect(), spec.submit_at)
                .map_err(sim_err(format!("intents[{i}]")))?;
        }
        Ok(sim)
    }

    pub fn run(&self, opts: RunOptions) -> Result<RunReport, RunError> {
        Ok(self.build(opts)?.run()?)
    }

    /// Linear chain `A - Y1 - ... - Y{n-2} - B` with identical links and one
    /// TELEPORT intent from A to B.
    pub fn chain(n: usize, link: LinkConfig, latency: f64, f_min: f64, tau_min: f64) -> Result<Self, ScenarioError> {
        if n < 2 {
            return Err(invalid("nodes", "a chain needs at least two nodes"));
        }
        let name = |i: usize| {
            let s = match i {
                0 => "A".to_string(),
                i if i == n - 1 => "B".to_string(),
                _ if n == 3 => "Y".to_string(),
                i => format!("Y{i}"),
            };
            QuantumAddress::new(s).expect("generated names are non-empty")
        };
        let nodes: Vec<QuantumAddress> = (0..n).map(name).collect();
        let quantum_links = nodes
            .windows(2)
            .map(|w| QuantumLinkSpec {
                a: w[0].clone(),
                b: w[1].clone(),
                config: link.clone(),
                prepared_by: None,
            })
            .collect();
        let classical_links = nodes
            .windows(2)
            .map(|w| ClassicalLinkSpec {
                a: w[0].clone(),
                b: w[1].clone(),
                latency,
            })
            .collect();
        let s = Scenario {
            name: format!("chain_{n}"),
            seed: 0,
            intents: vec![IntentSpec {
                service: Service::Teleport,
                participants: vec![nodes[0].clone(), nodes[n - 1].clone()],
                f_min,
                tau_min,
                origin: None,
                submit_at: 0.0,
                policy: BTreeMap::new(),
                payload: Vec::new(),
            }],
            nodes,
            quantum_links,
            classical_links,
            routes: None,
            initial_ftq: Vec::new(),
            hints: BTreeMap::new(),
            capabilities: BTreeMap::new(),
            engine: EngineParams::default(),
            link_mapping: LinkMapping::default(),
        };
        s.topology()?;
        Ok(s)
    }
}

/// Parameters for [`Scenario::chain`], stored as a scenario file with a
/// top-level `chain` object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTemplate {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub chain: ChainParams,
    #[serde(default)]
    pub engine: EngineParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub nodes: usize,
    pub link: LinkConfig,
    pub latency: f64,
    pub f_min: f64,
    #[serde(default)]
    pub tau_min: f64,
}

impl ChainTemplate {
    /// Expands to a concrete chain; `nodes` overrides the template length.
    pub fn expand(&self, nodes: Option<usize>) -> Result<Scenario, ScenarioError> {
        let c = &self.chain;
        let n = nodes.unwrap_or(c.nodes);
        let mut s = Scenario::chain(n, c.link.clone(), c.latency, c.f_min, c.tau_min)?;
        s.name = format!("{}_{n}", self.name);
        s.seed = self.seed;
        s.engine = self.engine.clone();
        Ok(s)
    }
}

/// Loads either a concrete scenario or a chain template.
pub fn load_any(path: &Path, chain_nodes: Option<usize>) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    if value.get("chain").is_some() {
        ChainTemplate::deserialize(value)?.expand(chain_nodes)
    } else {
        Scenario::from_json(&text)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
}
