//! Bounded exhaustive verification over canonical, span-limited clock
//! vectors. Every violation carries a witness trace that replays through the
//! engine and shows the breach.

mod lasso;
mod local;
mod space;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::configuration::{is_gamma1, node_max_drift, potential};
use crate::engine::{classify_lasso, raw_delta, CrashPlan, RunStatus, Step, Trace};
use crate::protocol::{Protocol, Rule, RuleDecision};
use crate::scheduler::{enabled_set, Daemon, Fairness};
use crate::topology::Topology;

pub use lasso::{
    check_convergence_reachability, convergence_in, find_starvation_lasso, find_starvation_lasso_for,
    starvation_in,
};
pub use local::{check_blocking, check_closure, check_potential_decrease, check_priority};
pub use space::{
    canonical_configurations, independent_subsets, selections, Edge, Exploration, Granularity, StateSpace,
    Traversal,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckError {
    #[error("processor {0} does not exist")]
    UnknownProcessor(usize),
    #[error("span bound must be at least 1")]
    ZeroSpan,
    #[error("initial clocks have span {span}, above the bound {bound}")]
    SpanExceeded { span: u64, bound: u64 },
    #[error("expected {expected} clocks, got {got}")]
    Length { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    Closure,
    Blocking,
    Priority,
    Potential,
    Starvation,
    /// A terminal configuration with at least one correct processor.
    Freeze,
    /// A strongly fair cycle that never enters Γ1.
    Convergence,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::Closure => "closure",
            ViolationKind::Blocking => "blocking",
            ViolationKind::Priority => "priority",
            ViolationKind::Potential => "potential",
            ViolationKind::Starvation => "starvation",
            ViolationKind::Freeze => "freeze",
            ViolationKind::Convergence => "convergence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// The processor the breach is about, when there is one.
    pub processor: Option<usize>,
    /// Fairness the witness lasso was searched under.
    pub fairness: Option<Fairness>,
    pub witness: Trace,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(p) = self.processor {
            write!(f, " p{p}")?;
        }
        if let Some(fair) = self.fairness {
            write!(f, " ({fair})")?;
        }
        write!(f, ": {}", self.detail)
    }
}

impl Violation {
    /// Replays the witness and confirms it exhibits the claimed breach.
    pub fn verify<P: Protocol + ?Sized>(&self, protocol: &P) -> Result<(), String> {
        let w = &self.witness;
        w.replay(protocol).map_err(|e| e.to_string())?;
        let graph = w.graph();
        let configs = w.configurations();
        let first = &configs[0];
        let processor = || self.processor.ok_or("missing processor");
        match self.kind {
            ViolationKind::Closure => {
                ensure(w.len() == 1, "closure witness must have one step")?;
                ensure(is_gamma1(graph, &first.clocks), "start is not in Γ1")?;
                ensure(!is_gamma1(graph, w.final_clocks()), "successor is in Γ1")
            }
            ViolationKind::Potential => {
                ensure(w.len() == 1, "potential witness must have one step")?;
                ensure(
                    w.steps[0].selected.iter().all(|&p| node_max_drift(graph, &first.clocks, p) >= 2),
                    "a selected processor has local drift below 2",
                )?;
                let (before, after) = (potential(graph, &first.clocks), potential(graph, w.final_clocks()));
                ensure(after >= before, "potential decreased")
            }
            ViolationKind::Blocking => {
                let p = processor()?;
                let h = first.clocks[p];
                let ns: Vec<u64> = graph.neighbors(p).iter().map(|&q| first.clocks[q]).collect();
                ensure(h >= 1 && ns.contains(&(h - 1)) && ns.contains(&(h + 1)), "no blocking pattern")?;
                ensure(protocol.decide(graph, &first.clocks, p).is_enabled(), "processor is not enabled")
            }
            ViolationKind::Priority => {
                let p = processor()?;
                let h = first.clocks[p];
                ensure(
                    graph.neighbors(p).iter().all(|&q| first.clocks[q] == h || first.clocks[q] == h + 1),
                    "neighbors are not at H or H+1",
                )?;
                ensure(
                    protocol.decide(graph, &first.clocks, p) != RuleDecision::Fire { rule: Rule::N, value: h + 1 },
                    "processor increments",
                )
            }
            ViolationKind::Freeze => {
                ensure(w.is_empty(), "freeze witness must have no steps")?;
                ensure(first.crashed.len() < graph.len(), "every processor is crashed")?;
                ensure(enabled_set(protocol, graph, first).is_empty(), "a processor is enabled")
            }
            ViolationKind::Starvation | ViolationKind::Convergence => {
                let start = w.lasso_start.ok_or("missing lasso start")?;
                let fairness = self.fairness.ok_or("missing fairness")?;
                let verdict = classify_lasso(protocol, w, start).map_err(|e| e.to_string())?;
                ensure(verdict.admits(fairness), "cycle is not admissible under the fairness")?;
                if self.kind == ViolationKind::Starvation {
                    let p = processor()?;
                    ensure(!first.crashed.contains(&p), "starving processor is crashed")?;
                    ensure(
                        (start..w.len()).all(|k| raw_delta(w, k, p) <= 0),
                        "processor increments in the cycle",
                    )
                } else {
                    ensure(
                        configs[start..].iter().all(|c| !is_gamma1(graph, &c.clocks)),
                        "cycle enters Γ1",
                    )
                }
            }
        }
    }
}

fn ensure(cond: bool, msg: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

/// Counts for one check plus its violations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckReport {
    pub check: String,
    pub topology: Topology,
    pub crashed: BTreeSet<usize>,
    pub span: u64,
    pub states: usize,
    pub transitions: usize,
    /// Transitions whose target exceeds the span bound. Single-step checks
    /// still examine them; lasso searches drop them.
    pub boundary: usize,
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn witness(&self) -> Option<&Violation> {
        self.violations.first()
    }

    pub fn summary(&self) -> String {
        let crashed: Vec<String> = self.crashed.iter().map(|p| p.to_string()).collect();
        format!(
            "check={} topology={} crashed={} span={} states={} transitions={} boundary={} violations={}",
            self.check,
            self.topology,
            crashed.join(","),
            self.span,
            self.states,
            self.transitions,
            self.boundary,
            self.violations.len()
        )
    }
}

/// Which check the CLI asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Closure,
    Blocking,
    Priority,
    Potential,
    Starvation(Fairness),
    Convergence,
}

impl FromStr for CheckKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "closure" => CheckKind::Closure,
            "blocking" => CheckKind::Blocking,
            "priority" => CheckKind::Priority,
            "potential" => CheckKind::Potential,
            "starvation" => CheckKind::Starvation(Fairness::Strong),
            "convergence" => CheckKind::Convergence,
            other => match other.strip_prefix("starvation:") {
                Some(f) => CheckKind::Starvation(f.parse()?),
                None => return Err(format!("unknown check `{other}`")),
            },
        })
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckKind::Closure => f.write_str("closure"),
            CheckKind::Blocking => f.write_str("blocking"),
            CheckKind::Priority => f.write_str("priority"),
            CheckKind::Potential => f.write_str("potential"),
            CheckKind::Starvation(fair) => write!(f, "starvation:{fair}"),
            CheckKind::Convergence => f.write_str("convergence"),
        }
    }
}

pub fn run_check<P: Protocol + ?Sized>(
    protocol: &P,
    kind: CheckKind,
    topology: &Topology,
    crashed: &BTreeSet<usize>,
    span: u64,
) -> Result<CheckReport, CheckError> {
    match kind {
        CheckKind::Closure => check_closure(protocol, topology, crashed, span),
        CheckKind::Blocking => check_blocking(protocol, topology, span),
        CheckKind::Priority => check_priority(protocol, topology, span),
        CheckKind::Potential => check_potential_decrease(protocol, topology, crashed, span),
        CheckKind::Starvation(fair) => find_starvation_lasso(protocol, topology, crashed, span, fair),
        CheckKind::Convergence => check_convergence_reachability(protocol, topology, crashed, span),
    }
}

fn witness_trace(topology: &Topology, crashed: &BTreeSet<usize>, initial: Vec<u64>, status: RunStatus) -> Trace {
    Trace {
        topology: topology.clone(),
        daemon: Daemon::LocallyCentral,
        initial,
        crash_plan: CrashPlan::initial(crashed.iter().copied()),
        policy: "checker".into(),
        seed: 0,
        status,
        lasso_start: None,
        steps: Vec::new(),
    }
}

fn push_step(trace: &mut Trace, selected: Vec<usize>, fired: Vec<(usize, Rule)>, clocks: Vec<u64>, shift: u64) {
    let gamma1 = is_gamma1(trace.graph(), &clocks);
    trace.steps.push(Step {
        selected,
        fired,
        clocks_after: clocks,
        crashed: trace.crash_plan.crashed_by(0).into_iter().collect(),
        gamma1,
        shift,
    });
}
