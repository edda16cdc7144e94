//! Deterministic simulator of a dynamic-kernel quantum network: per-node
//! planning and execution, single-writer stamps, and a commit DAG that can
//! be rebuilt and checked from any run trace.

pub mod dag;
pub mod kernel;
pub mod mp;
pub mod scenario;
pub mod sim;
pub mod state;
pub mod trace;
pub mod types;

pub use sim::{EngineParams, HeaderId, RunReport, SimError, Simulator, Topology};
pub use trace::{Trace, TraceRecord};
pub use types::{ActionKind, EntId, EntanglementResource, MetaHeader, QuantumAddress, ServiceIntent, Stamp};
