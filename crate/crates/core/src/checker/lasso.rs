use std::collections::{BTreeSet, VecDeque};

use crate::configuration::is_gamma1;
use crate::engine::RunStatus;
use crate::protocol::Protocol;
use crate::scheduler::Fairness;
use crate::topology::Topology;

use super::space::{Edge, Granularity, StateSpace};
use super::{push_step, witness_trace, CheckError, CheckReport, Violation, ViolationKind};

type EdgeFilter<'a> = dyn Fn(usize, &Edge) -> bool + 'a;

/// Strongly connected components of the states marked alive, following only
/// edges that `keep` accepts. Iterative Tarjan.
fn tarjan(space: &StateSpace, alive: &[bool], keep: &EdgeFilter) -> Vec<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    let n = space.len();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut counter = 0;

    for root in (0..n).filter(|&r| alive[r]) {
        if index[root] != UNSEEN {
            continue;
        }
        let mut calls: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&(v, pos)) = calls.last() {
            let edges = space.edges(v);
            if pos < edges.len() {
                calls.last_mut().unwrap().1 += 1;
                let e = &edges[pos];
                let w = e.target;
                if !alive[w] || !keep(v, e) {
                    continue;
                }
                if index[w] == UNSEEN {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    calls.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                calls.pop();
                if let Some(&(u, _)) = calls.last() {
                    low[u] = low[u].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    comps.push(comp);
                }
            }
        }
    }
    comps
}

fn internal_edges<'a>(
    space: &'a StateSpace,
    members: &'a [usize],
    inside: &'a [bool],
    keep: &'a EdgeFilter,
) -> impl Iterator<Item = (usize, usize, &'a Edge)> + 'a {
    members.iter().flat_map(move |&s| {
        space
            .edges(s)
            .iter()
            .enumerate()
            .filter(move |(_, e)| inside[e.target] && keep(s, e))
            .map(move |(i, e)| (s, i, e))
    })
}

fn mask(n: usize, members: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &s in members {
        m[s] = true;
    }
    m
}

/// A set of states inside which a cycle admissible under `fairness` can be
/// built from kept edges, if any exists among `alive`.
fn fair_component(space: &StateSpace, alive: Vec<bool>, keep: &EdgeFilter, fairness: Fairness) -> Option<Vec<usize>> {
    let mut work = vec![alive];
    while let Some(alive) = work.pop() {
        for comp in tarjan(space, &alive, keep) {
            let inside = mask(space.len(), &comp);
            let mut executed = BTreeSet::new();
            let mut has_edge = false;
            for (_, _, e) in internal_edges(space, &comp, &inside, keep) {
                has_edge = true;
                executed.extend(e.selection.iter().copied());
            }
            if !has_edge {
                continue;
            }
            match fairness {
                Fairness::Weak => {
                    // Dropping states only shrinks what runs and grows what is
                    // always enabled, so the whole component is the best case.
                    let always = comp
                        .iter()
                        .map(|&s| space.enabled(s).iter().copied().collect::<BTreeSet<_>>())
                        .reduce(|a, b| a.intersection(&b).copied().collect())
                        .unwrap_or_default();
                    if always.is_subset(&executed) {
                        return Some(comp);
                    }
                }
                Fairness::Strong => {
                    let bad: BTreeSet<usize> = comp
                        .iter()
                        .flat_map(|&s| space.enabled(s).iter().copied())
                        .filter(|p| !executed.contains(p))
                        .collect();
                    if bad.is_empty() {
                        return Some(comp);
                    }
                    let rest: Vec<usize> = comp
                        .iter()
                        .copied()
                        .filter(|&s| !space.enabled(s).iter().any(|p| bad.contains(p)))
                        .collect();
                    if !rest.is_empty() {
                        work.push(mask(space.len(), &rest));
                    }
                }
            }
        }
    }
    None
}

/// Shortest kept path inside the component, as `(source, edge index)` pairs.
fn path(space: &StateSpace, inside: &[bool], keep: &EdgeFilter, from: usize, to: usize) -> Vec<(usize, usize)> {
    if from == to {
        return Vec::new();
    }
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; space.len()];
    let mut seen = vec![false; space.len()];
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        for (i, e) in space.edges(v).iter().enumerate() {
            let w = e.target;
            if !inside[w] || seen[w] || !keep(v, e) {
                continue;
            }
            seen[w] = true;
            parent[w] = Some((v, i));
            if w == to {
                let mut out = Vec::new();
                let mut cur = to;
                while let Some((p, i)) = parent[cur] {
                    out.push((p, i));
                    cur = p;
                }
                out.reverse();
                return out;
            }
            queue.push_back(w);
        }
    }
    unreachable!("states of a strongly connected component reach each other")
}

enum Waypoint {
    Edge(usize, usize),
    State(usize),
}

/// A closed walk through the component that executes every processor the
/// component executes and, under weak fairness, passes through a state where
/// each never-executed processor is disabled.
fn cycle_through(space: &StateSpace, comp: &[usize], keep: &EdgeFilter, fairness: Fairness) -> Vec<(usize, usize)> {
    let inside = mask(space.len(), comp);
    let mut waypoints = Vec::new();
    let mut covered = BTreeSet::new();
    for (s, i, e) in internal_edges(space, comp, &inside, keep) {
        if e.selection.iter().any(|p| !covered.contains(p)) {
            covered.extend(e.selection.iter().copied());
            waypoints.push(Waypoint::Edge(s, i));
        }
    }
    if fairness == Fairness::Weak {
        let sometimes: BTreeSet<usize> = comp.iter().flat_map(|&s| space.enabled(s).iter().copied()).collect();
        for p in sometimes.difference(&covered) {
            let s = *comp
                .iter()
                .find(|&&s| !space.enabled(s).contains(p))
                .expect("weakly fair component disables every idle processor somewhere");
            waypoints.push(Waypoint::State(s));
        }
    }
    let start = match waypoints.first() {
        Some(Waypoint::Edge(s, _)) | Some(Waypoint::State(s)) => *s,
        None => unreachable!("a component with an edge executes someone"),
    };
    let mut walk = Vec::new();
    let mut cur = start;
    for w in &waypoints {
        match *w {
            Waypoint::Edge(s, i) => {
                walk.extend(path(space, &inside, keep, cur, s));
                walk.push((s, i));
                cur = space.edges(s)[i].target;
            }
            Waypoint::State(s) => {
                walk.extend(path(space, &inside, keep, cur, s));
                cur = s;
            }
        }
    }
    walk.extend(path(space, &inside, keep, cur, start));
    walk
}

fn lasso_violation(
    space: &StateSpace,
    walk: &[(usize, usize)],
    kind: ViolationKind,
    processor: Option<usize>,
    fairness: Fairness,
    detail: String,
) -> Violation {
    let start = walk[0].0;
    let mut witness = witness_trace(
        space.topology(),
        space.crashed(),
        space.clocks(start).to_vec(),
        RunStatus::Lasso,
    );
    witness.lasso_start = Some(0);
    for &(s, i) in walk {
        let e = &space.edges(s)[i];
        push_step(
            &mut witness,
            e.selection.clone(),
            e.fired.clone(),
            space.clocks(e.target).to_vec(),
            e.shift,
        );
    }
    Violation {
        kind,
        processor,
        fairness: Some(fairness),
        witness,
        detail,
    }
}

fn report_for(space: &StateSpace, check: String, violations: Vec<Violation>) -> CheckReport {
    CheckReport {
        check,
        topology: space.topology().clone(),
        crashed: space.crashed().clone(),
        span: space.span_bound(),
        states: space.len(),
        transitions: space.transition_count(),
        boundary: space.boundary_count(),
        violations,
    }
}

/// Searches for a cycle admissible under `fairness` in which `target` never
/// increments its raw clock.
pub fn starvation_in(space: &StateSpace, target: usize, fairness: Fairness) -> Option<Violation> {
    if space.crashed().contains(&target) || target >= space.graph().len() {
        return None;
    }
    let keep = |s: usize, e: &Edge| space.raw_delta(s, e, target) <= 0;
    let comp = fair_component(space, vec![true; space.len()], &keep, fairness)?;
    let walk = cycle_through(space, &comp, &keep, fairness);
    let starving: Vec<String> = (0..space.graph().len())
        .filter(|p| !space.crashed().contains(p))
        .filter(|&p| walk.iter().all(|&(s, i)| space.raw_delta(s, &space.edges(s)[i], p) <= 0))
        .map(|p| format!("p{p}"))
        .collect();
    Some(lasso_violation(
        space,
        &walk,
        ViolationKind::Starvation,
        Some(target),
        fairness,
        format!("{}-step cycle never increments {}", walk.len(), starving.join(", ")),
    ))
}

/// Like [`find_starvation_lasso`] but only for one processor.
pub fn find_starvation_lasso_for<P: Protocol + ?Sized>(
    protocol: &P,
    topology: &Topology,
    crashed: &BTreeSet<usize>,
    span_bound: u64,
    fairness: Fairness,
    target: usize,
) -> Result<CheckReport, CheckError> {
    let space = StateSpace::full(protocol, topology, crashed, span_bound, Granularity::SinglesAndMaximal)?;
    let found = starvation_in(&space, target, fairness);
    Ok(report_for(&space, format!("starvation:{fairness}"), found.into_iter().collect()))
}

/// Searches every canonical configuration for a fair cycle that starves a
/// correct processor. At most one witness is reported, for the lowest
/// starving processor id.
pub fn find_starvation_lasso<P: Protocol + ?Sized>(
    protocol: &P,
    topology: &Topology,
    crashed: &BTreeSet<usize>,
    span_bound: u64,
    fairness: Fairness,
) -> Result<CheckReport, CheckError> {
    let space = StateSpace::full(protocol, topology, crashed, span_bound, Granularity::SinglesAndMaximal)?;
    let found = (0..topology.len()).find_map(|p| starvation_in(&space, p, fairness));
    Ok(report_for(&space, format!("starvation:{fairness}"), found.into_iter().collect()))
}

/// Terminal configurations with a correct processor, and strongly fair
/// cycles that stay outside Γ1.
pub fn convergence_in(space: &StateSpace) -> Vec<Violation> {
    let graph = space.graph();
    let correct = space.crashed().len() < graph.len();
    let mut out: Vec<Violation> = (0..space.len())
        .filter(|&s| correct && space.is_terminal(s))
        .map(|s| Violation {
            kind: ViolationKind::Freeze,
            processor: None,
            fairness: None,
            witness: witness_trace(
                space.topology(),
                space.crashed(),
                space.clocks(s).to_vec(),
                RunStatus::Terminal,
            ),
            detail: format!("{:?} is terminal", space.clocks(s)),
        })
        .collect();

    let mut alive: Vec<bool> = (0..space.len()).map(|s| !is_gamma1(graph, space.clocks(s))).collect();
    let keep = |_: usize, _: &Edge| true;
    while let Some(comp) = fair_component(space, alive.clone(), &keep, Fairness::Strong) {
        let walk = cycle_through(space, &comp, &keep, Fairness::Strong);
        out.push(lasso_violation(
            space,
            &walk,
            ViolationKind::Convergence,
            None,
            Fairness::Strong,
            format!("{}-step strongly fair cycle avoids Γ1", walk.len()),
        ));
        for s in comp {
            alive[s] = false;
        }
    }
    out
}

pub fn check_convergence_reachability<P: Protocol + ?Sized>(
    protocol: &P,
    topology: &Topology,
    crashed: &BTreeSet<usize>,
    span_bound: u64,
) -> Result<CheckReport, CheckError> {
    let space = StateSpace::full(protocol, topology, crashed, span_bound, Granularity::SinglesAndMaximal)?;
    let violations = convergence_in(&space);
    Ok(report_for(&space, "convergence".into(), violations))
}
