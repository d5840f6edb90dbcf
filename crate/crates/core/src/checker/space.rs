use std::collections::{BTreeSet, HashMap, VecDeque};

use rayon::prelude::*;

use crate::configuration::{canonicalize_clocks, is_canonical, span, Configuration};
use crate::engine::step;
use crate::protocol::{Protocol, Rule};
use crate::scheduler::enabled_in;
use crate::topology::{Graph, Topology};

use super::CheckError;

/// Which LocallyCentral selections become transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Single processors plus maximal independent sets of enabled processors.
    SinglesAndMaximal,
    /// Every non-empty independent set of enabled processors.
    AllIndependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Traversal {
    Bfs,
    Dfs,
}

#[derive(Debug, Clone)]
pub enum Exploration {
    /// Every canonical configuration within the span bound.
    Full { parallel: bool },
    /// Configurations reachable from `init`.
    Reachable { init: Vec<u64>, traversal: Traversal },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub selection: Vec<usize>,
    pub fired: Vec<(usize, Rule)>,
    pub target: usize,
    pub shift: u64,
}

/// Canonical configurations of one topology and crash set, with their
/// LocallyCentral transitions.
#[derive(Debug, Clone)]
pub struct StateSpace {
    topology: Topology,
    crashed: BTreeSet<usize>,
    span: u64,
    states: Vec<Vec<u64>>,
    index: HashMap<Vec<u64>, usize>,
    enabled: Vec<Vec<usize>>,
    edges: Vec<Vec<Edge>>,
    boundary: usize,
}

struct Expansion {
    enabled: Vec<usize>,
    successors: Vec<(Vec<usize>, Vec<(usize, Rule)>, Vec<u64>, u64)>,
    boundary: usize,
}

impl StateSpace {
    pub fn full<P: Protocol + ?Sized>(
        protocol: &P,
        topology: &Topology,
        crashed: &BTreeSet<usize>,
        span_bound: u64,
        granularity: Granularity,
    ) -> Result<Self, CheckError> {
        Self::build(
            protocol,
            topology,
            crashed,
            span_bound,
            granularity,
            Exploration::Full { parallel: true },
        )
    }

    pub fn build<P: Protocol + ?Sized>(
        protocol: &P,
        topology: &Topology,
        crashed: &BTreeSet<usize>,
        span_bound: u64,
        granularity: Granularity,
        exploration: Exploration,
    ) -> Result<Self, CheckError> {
        let graph = topology.graph();
        if let Some(&p) = crashed.iter().find(|&&p| p >= graph.len()) {
            return Err(CheckError::UnknownProcessor(p));
        }
        if span_bound == 0 {
            return Err(CheckError::ZeroSpan);
        }
        let expand = |clocks: &Vec<u64>| expand(protocol, graph, crashed, span_bound, granularity, clocks);
        let mut space = StateSpace {
            topology: topology.clone(),
            crashed: crashed.clone(),
            span: span_bound,
            states: Vec::new(),
            index: HashMap::new(),
            enabled: Vec::new(),
            edges: Vec::new(),
            boundary: 0,
        };
        match exploration {
            Exploration::Full { parallel } => {
                space.states = canonical_configurations(graph.len(), span_bound);
                space.index = space.states.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
                let expansions: Vec<Expansion> = if parallel {
                    space.states.par_iter().map(expand).collect()
                } else {
                    space.states.iter().map(expand).collect()
                };
                for x in expansions {
                    space.push_expansion(x);
                }
            }
            Exploration::Reachable { init, traversal } => {
                let mut init = init;
                if init.len() != graph.len() {
                    return Err(CheckError::Length {
                        expected: graph.len(),
                        got: init.len(),
                    });
                }
                canonicalize_clocks(&mut init);
                if span(&init) > span_bound {
                    return Err(CheckError::SpanExceeded {
                        span: span(&init),
                        bound: span_bound,
                    });
                }
                let mut frontier = VecDeque::from([init.clone()]);
                space.intern(init);
                let mut expansions: HashMap<usize, Expansion> = HashMap::new();
                while let Some(clocks) = match traversal {
                    Traversal::Bfs => frontier.pop_front(),
                    Traversal::Dfs => frontier.pop_back(),
                } {
                    let id = space.index[&clocks];
                    let x = expand(&clocks);
                    for (_, _, target, _) in &x.successors {
                        if !space.index.contains_key(target) {
                            space.intern(target.clone());
                            frontier.push_back(target.clone());
                        }
                    }
                    expansions.insert(id, x);
                }
                for id in 0..space.states.len() {
                    let x = expansions.remove(&id).expect("every interned state is expanded");
                    space.push_expansion(x);
                }
            }
        }
        Ok(space)
    }

    fn intern(&mut self, clocks: Vec<u64>) -> usize {
        let id = self.states.len();
        self.index.insert(clocks.clone(), id);
        self.states.push(clocks);
        id
    }

    fn push_expansion(&mut self, x: Expansion) {
        self.boundary += x.boundary;
        self.enabled.push(x.enabled);
        let edges = x
            .successors
            .into_iter()
            .map(|(selection, fired, target, shift)| Edge {
                selection,
                fired,
                target: self.index[&target],
                shift,
            })
            .collect();
        self.edges.push(edges);
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn graph(&self) -> &Graph {
        self.topology.graph()
    }

    pub fn crashed(&self) -> &BTreeSet<usize> {
        &self.crashed
    }

    pub fn span_bound(&self) -> u64 {
        self.span
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn clocks(&self, id: usize) -> &[u64] {
        &self.states[id]
    }

    pub fn configuration(&self, id: usize) -> Configuration {
        Configuration {
            clocks: self.states[id].clone(),
            crashed: self.crashed.clone(),
        }
    }

    pub fn id_of(&self, clocks: &[u64]) -> Option<usize> {
        self.index.get(clocks).copied()
    }

    /// Correct processors enabled in a state.
    pub fn enabled(&self, id: usize) -> &[usize] {
        &self.enabled[id]
    }

    pub fn edges(&self, id: usize) -> &[Edge] {
        &self.edges[id]
    }

    pub fn transition_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Transitions dropped because their target exceeds the span bound.
    pub fn boundary_count(&self) -> usize {
        self.boundary
    }

    /// No correct processor is enabled.
    pub fn is_terminal(&self, id: usize) -> bool {
        self.enabled[id].is_empty()
    }

    pub fn raw_delta(&self, source: usize, edge: &Edge, p: usize) -> i64 {
        (self.states[edge.target][p] + edge.shift) as i64 - self.states[source][p] as i64
    }

    /// Every transition as `(source clocks, selection, target clocks, shift)`,
    /// for comparing spaces built in different orders.
    pub fn transition_set(&self) -> BTreeSet<(Vec<u64>, Vec<usize>, Vec<u64>, u64)> {
        self.edges
            .iter()
            .enumerate()
            .flat_map(|(s, es)| {
                es.iter().map(move |e| {
                    (
                        self.states[s].clone(),
                        e.selection.clone(),
                        self.states[e.target].clone(),
                        e.shift,
                    )
                })
            })
            .collect()
    }

    pub fn state_set(&self) -> BTreeSet<Vec<u64>> {
        self.states.iter().cloned().collect()
    }
}

fn expand<P: Protocol + ?Sized>(
    protocol: &P,
    graph: &Graph,
    crashed: &BTreeSet<usize>,
    span_bound: u64,
    granularity: Granularity,
    clocks: &Vec<u64>,
) -> Expansion {
    let enabled = enabled_in(protocol, graph, clocks, |p| crashed.contains(&p));
    let config = Configuration {
        clocks: clocks.clone(),
        crashed: crashed.clone(),
    };
    let mut successors = Vec::new();
    let mut boundary = 0;
    for selection in selections(graph, &enabled, granularity) {
        let (next, fired) = step(protocol, graph, &config, &selection).expect("selections are enabled and correct");
        let mut target = next.clocks;
        let shift = canonicalize_clocks(&mut target);
        if span(&target) > span_bound {
            boundary += 1;
        } else {
            successors.push((selection, fired, target, shift));
        }
    }
    Expansion {
        enabled,
        successors,
        boundary,
    }
}

/// All clock vectors with minimum 0 or 1 and span at most `span_bound`, in
/// lexicographic order.
pub fn canonical_configurations(n: usize, span_bound: u64) -> Vec<Vec<u64>> {
    let top = span_bound + 1;
    let mut out = Vec::new();
    let mut v = vec![0u64; n];
    loop {
        if is_canonical(&v) && span(&v) <= span_bound {
            out.push(v.clone());
        }
        let mut i = n;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if v[i] < top {
                v[i] += 1;
                break;
            }
            v[i] = 0;
        }
    }
}

pub fn selections(graph: &Graph, enabled: &[usize], granularity: Granularity) -> Vec<Vec<usize>> {
    let all = independent_subsets(graph, enabled);
    match granularity {
        Granularity::AllIndependent => all,
        Granularity::SinglesAndMaximal => all
            .into_iter()
            .filter(|set| {
                set.len() == 1
                    || enabled
                        .iter()
                        .all(|p| set.contains(p) || set.iter().any(|&q| graph.are_neighbors(*p, q)))
            })
            .collect(),
    }
}

/// Non-empty subsets of `items` with no two neighbors, ordered by bitmask.
pub fn independent_subsets(graph: &Graph, items: &[usize]) -> Vec<Vec<usize>> {
    assert!(items.len() < 32, "too many processors to enumerate subsets");
    (1u32..1 << items.len())
        .filter_map(|mask| {
            let set: Vec<usize> = (0..items.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| items[i])
                .collect();
            let independent = set
                .iter()
                .enumerate()
                .all(|(i, &p)| set[i + 1..].iter().all(|&q| !graph.are_neighbors(p, q)));
            independent.then_some(set)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Uftss;

    #[test]
    fn canonical_enumeration_counts() {
        // Vectors in [0,S]^n containing 0, plus the same shifted by one.
        let expected = |n: u32, s: u64| 2 * ((s + 1).pow(n) - s.pow(n)) as usize;
        for (n, s) in [(3, 2), (4, 3), (5, 4)] {
            let states = canonical_configurations(n as usize, s);
            assert_eq!(states.len(), expected(n, s));
            assert!(states.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn selection_granularity() {
        let g = Graph::chain(4).unwrap();
        let all = selections(&g, &[0, 1, 2, 3], Granularity::AllIndependent);
        assert_eq!(all.len(), 7); // 4 singles, {0,2}, {0,3}, {1,3}
        let coarse = selections(&g, &[0, 1, 2, 3], Granularity::SinglesAndMaximal);
        assert_eq!(
            coarse,
            vec![vec![0], vec![1], vec![2], vec![0, 2], vec![3], vec![0, 3], vec![1, 3]]
        );
        assert!(selections(&g, &[], Granularity::AllIndependent).is_empty());
    }

    #[test]
    fn parallel_and_sequential_builds_agree() {
        let t = Topology::chain(4).unwrap();
        let crashed = BTreeSet::from([1]);
        let build = |parallel| {
            StateSpace::build(
                &Uftss,
                &t,
                &crashed,
                3,
                Granularity::AllIndependent,
                Exploration::Full { parallel },
            )
            .unwrap()
        };
        let (a, b) = (build(true), build(false));
        assert_eq!(a.states, b.states);
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.boundary, b.boundary);
    }

    #[test]
    fn traversal_order_does_not_change_the_space() {
        let t = Topology::chain(3).unwrap();
        for init in [vec![0, 3, 1], vec![5, 2, 4], vec![1, 1, 1]] {
            let build = |traversal| {
                StateSpace::build(
                    &Uftss,
                    &t,
                    &BTreeSet::new(),
                    3,
                    Granularity::AllIndependent,
                    Exploration::Reachable {
                        init: init.clone(),
                        traversal,
                    },
                )
                .unwrap()
            };
            let (bfs, dfs) = (build(Traversal::Bfs), build(Traversal::Dfs));
            assert_eq!(bfs.state_set(), dfs.state_set());
            assert_eq!(bfs.transition_set(), dfs.transition_set());
            assert_eq!(bfs.boundary_count(), dfs.boundary_count());
        }
    }

    #[test]
    fn edges_are_consistent_with_the_engine() {
        let t = Topology::ring(4).unwrap();
        let space = StateSpace::full(&Uftss, &t, &BTreeSet::from([0]), 3, Granularity::AllIndependent).unwrap();
        assert!(space.boundary_count() > 0);
        for id in 0..space.len() {
            for e in space.edges(id) {
                let (next, fired) = step(&Uftss, t.graph(), &space.configuration(id), &e.selection).unwrap();
                assert_eq!(fired, e.fired);
                let raw: Vec<u64> = space.clocks(e.target).iter().map(|c| c + e.shift).collect();
                assert_eq!(next.clocks, raw);
                assert_eq!(space.raw_delta(id, e, 0), 0);
            }
        }
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let t = Topology::chain(3).unwrap();
        let full = |crashed: BTreeSet<usize>, s| StateSpace::full(&Uftss, &t, &crashed, s, Granularity::AllIndependent);
        assert!(matches!(full(BTreeSet::from([7]), 3), Err(CheckError::UnknownProcessor(7))));
        assert!(matches!(full(BTreeSet::new(), 0), Err(CheckError::ZeroSpan)));
        let wide = StateSpace::build(
            &Uftss,
            &t,
            &BTreeSet::new(),
            2,
            Granularity::AllIndependent,
            Exploration::Reachable {
                init: vec![0, 9, 0],
                traversal: Traversal::Bfs,
            },
        );
        assert!(matches!(wide, Err(CheckError::SpanExceeded { span: 9, bound: 2 })));
    }
}
