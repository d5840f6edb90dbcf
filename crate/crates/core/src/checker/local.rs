use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::configuration::{is_gamma1, node_max_drift, potential, span, Configuration};
use crate::engine::{step, RunStatus};
use crate::protocol::{Protocol, Rule, RuleDecision};
use crate::scheduler::enabled_in;
use crate::topology::Topology;

use super::space::{canonical_configurations, independent_subsets};
use super::{push_step, witness_trace, CheckError, CheckReport, Violation, ViolationKind};

struct Tally {
    transitions: usize,
    boundary: usize,
    violations: Vec<Violation>,
}

fn validate(topology: &Topology, crashed: &BTreeSet<usize>, span_bound: u64) -> Result<(), CheckError> {
    if span_bound == 0 {
        return Err(CheckError::ZeroSpan);
    }
    match crashed.iter().find(|&&p| p >= topology.len()) {
        Some(&p) => Err(CheckError::UnknownProcessor(p)),
        None => Ok(()),
    }
}

/// Runs `visit` on every canonical configuration in parallel and merges
/// the results in enumeration order.
fn sweep<F>(
    name: &str,
    topology: &Topology,
    crashed: &BTreeSet<usize>,
    span_bound: u64,
    filter: impl Fn(&[u64]) -> bool + Sync,
    visit: F,
) -> CheckReport
where
    F: Fn(&[u64]) -> Tally + Sync,
{
    let states: Vec<Vec<u64>> = canonical_configurations(topology.len(), span_bound)
        .into_iter()
        .filter(|c| filter(c))
        .collect();
    let tallies: Vec<Tally> = states.par_iter().map(|c| visit(c)).collect();
    let mut report = CheckReport {
        check: name.into(),
        topology: topology.clone(),
        crashed: crashed.clone(),
        span: span_bound,
        states: states.len(),
        transitions: 0,
        boundary: 0,
        violations: Vec::new(),
    };
    for t in tallies {
        report.transitions += t.transitions;
        report.boundary += t.boundary;
        report.violations.extend(t.violations);
    }
    report
}

/// One-step successors of a configuration over the given selections,
/// flagging those that `bad` rejects.
fn successors<P: Protocol + ?Sized>(
    protocol: &P,
    topology: &Topology,
    crashed: &BTreeSet<usize>,
    span_bound: u64,
    clocks: &[u64],
    candidates: &[usize],
    kind: ViolationKind,
    bad: impl Fn(&[u64]) -> Option<String>,
) -> Tally {
    let graph = topology.graph();
    let config = Configuration {
        clocks: clocks.to_vec(),
        crashed: crashed.clone(),
    };
    let mut tally = Tally {
        transitions: 0,
        boundary: 0,
        violations: Vec::new(),
    };
    for selection in independent_subsets(graph, candidates) {
        let (next, fired) = step(protocol, graph, &config, &selection).expect("candidates are enabled");
        tally.transitions += 1;
        if span(&next.clocks) > span_bound {
            tally.boundary += 1;
        }
        if let Some(detail) = bad(&next.clocks) {
            let mut witness = witness_trace(topology, crashed, clocks.to_vec(), RunStatus::MaxSteps);
            push_step(&mut witness, selection, fired, next.clocks, 0);
            tally.violations.push(Violation {
                kind,
                processor: None,
                fairness: None,
                witness,
                detail,
            });
        }
    }
    tally
}

/// Every LocallyCentral step from a Γ1 configuration stays in Γ1.
pub fn check_closure<P: Protocol + ?Sized>(
    protocol: &P,
    topology: &Topology,
    crashed: &BTreeSet<usize>,
    span_bound: u64,
) -> Result<CheckReport, CheckError> {
    validate(topology, crashed, span_bound)?;
    let graph = topology.graph();
    Ok(sweep(
        "closure",
        topology,
        crashed,
        span_bound,
        |c| is_gamma1(graph, c),
        |clocks| {
            let enabled = enabled_in(protocol, graph, clocks, |p| crashed.contains(&p));
            successors(
                protocol,
                topology,
                crashed,
                span_bound,
                clocks,
                &enabled,
                ViolationKind::Closure,
                |next| (!is_gamma1(graph, next)).then(|| format!("{clocks:?} leaves Γ1 to {next:?}")),
            )
        },
    ))
}

/// Steps by processors with local drift at least 2 strictly decrease the
/// potential.
pub fn check_potential_decrease<P: Protocol + ?Sized>(
    protocol: &P,
    topology: &Topology,
    crashed: &BTreeSet<usize>,
    span_bound: u64,
) -> Result<CheckReport, CheckError> {
    validate(topology, crashed, span_bound)?;
    let graph = topology.graph();
    Ok(sweep(
        "potential",
        topology,
        crashed,
        span_bound,
        |c| !is_gamma1(graph, c),
        |clocks| {
            let drifting: Vec<usize> = enabled_in(protocol, graph, clocks, |p| crashed.contains(&p))
                .into_iter()
                .filter(|&p| node_max_drift(graph, clocks, p) >= 2)
                .collect();
            let before = potential(graph, clocks);
            successors(
                protocol,
                topology,
                crashed,
                span_bound,
                clocks,
                &drifting,
                ViolationKind::Potential,
                |next| {
                    let after = potential(graph, next);
                    (after >= before).then(|| format!("potential {before} does not drop (now {after})"))
                },
            )
        },
    ))
}

fn per_processor<P: Protocol + ?Sized>(
    name: &str,
    kind: ViolationKind,
    protocol: &P,
    topology: &Topology,
    span_bound: u64,
    applies: impl Fn(u64, &[u64]) -> bool + Sync,
    bad: impl Fn(u64, RuleDecision) -> bool + Sync,
) -> Result<CheckReport, CheckError> {
    let none = BTreeSet::new();
    validate(topology, &none, span_bound)?;
    let graph = topology.graph();
    Ok(sweep(name, topology, &none, span_bound, |_| true, |clocks| {
        let mut violations = Vec::new();
        for p in 0..graph.len() {
            let h = clocks[p];
            let around: Vec<u64> = graph.neighbors(p).iter().map(|&q| clocks[q]).collect();
            if !applies(h, &around) {
                continue;
            }
            let decision = protocol.decide(graph, clocks, p);
            if bad(h, decision) {
                violations.push(Violation {
                    kind,
                    processor: Some(p),
                    fairness: None,
                    witness: witness_trace(topology, &none, clocks.to_vec(), RunStatus::MaxSteps),
                    detail: format!("{clocks:?}: p{p} decides {decision:?}"),
                });
            }
        }
        Tally {
            transitions: 0,
            boundary: 0,
            violations,
        }
    }))
}

/// A processor with neighbors at H−1 and H+1 is never enabled.
pub fn check_blocking<P: Protocol + ?Sized>(
    protocol: &P,
    topology: &Topology,
    span_bound: u64,
) -> Result<CheckReport, CheckError> {
    per_processor(
        "blocking",
        ViolationKind::Blocking,
        protocol,
        topology,
        span_bound,
        |h, around| h >= 1 && around.contains(&(h - 1)) && around.contains(&(h + 1)),
        |_, decision| decision.is_enabled(),
    )
}

/// A processor whose neighbors all sit at H or H+1 increments in one move.
pub fn check_priority<P: Protocol + ?Sized>(
    protocol: &P,
    topology: &Topology,
    span_bound: u64,
) -> Result<CheckReport, CheckError> {
    per_processor(
        "priority",
        ViolationKind::Priority,
        protocol,
        topology,
        span_bound,
        |h, around| around.iter().all(|&c| c == h || c == h + 1),
        |h, decision| decision != RuleDecision::Fire { rule: Rule::N, value: h + 1 },
    )
}
