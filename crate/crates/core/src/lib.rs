//! Simulation, scheduling and bounded model checking for a self-stabilizing
//! asynchronous unison protocol that tolerates crashed processors.

pub mod checker;
pub mod configuration;
pub mod engine;
pub mod protocol;
pub mod scenarios;
pub mod scheduler;
pub mod topology;

pub use configuration::{is_gamma1, is_gamma1_star, potential, Configuration, Potential};
pub use engine::{run, step, CrashPlan, RunSpec, RunStatus, StopCondition, Trace};
pub use protocol::{Protocol, Rule, RuleDecision, Uftss};
pub use scheduler::{Daemon, Fairness, Policy};
pub use topology::{Graph, Topology};
