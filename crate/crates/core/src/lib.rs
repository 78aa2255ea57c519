//! Warp-level gradient reduction: a deterministic SIMT warp model, a
//! synthetic workload generator, software reduction policies and a
//! cycle-approximate model of the SM to L2 atomic path with an optional
//! sub-core reduction unit.

pub mod error;
pub mod hwsim;
pub mod io;
pub mod reducers;
pub mod simt;
pub mod tuner;
pub mod workload;

pub use error::{Error, Result};
pub use hwsim::{simulate, MachineConfig, QueueDepth, RunMetrics, SimOutcome};
pub use reducers::{oracle_sum, Address, AtomicRequest, BalancingThreshold, Policy, PolicyOutput};
pub use simt::{LaneMask, WARP_SIZE};
pub use tuner::{tune, PolicyFamily, TuneReport};
pub use workload::{generate, SceneSpec, Trace, WarpRecord};
