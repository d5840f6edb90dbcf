//! Global configurations and the predicates and measures defined over them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::topology::Graph;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigurationError {
    #[error("configuration has {got} clocks but the topology has {expected} processors")]
    SizeMismatch { expected: usize, got: usize },
    #[error("crashed processor {0} is not a processor of the topology")]
    CrashOutOfRange(usize),
    #[error("malformed configuration literal: {0}")]
    Parse(String),
}

/// Clock value of every processor plus the set of crashed processors.
///
/// Crashed processors keep their clock readable; they simply never execute.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Configuration {
    pub clocks: Vec<u64>,
    pub crashed: BTreeSet<usize>,
}

impl Configuration {
    pub fn new(clocks: Vec<u64>) -> Self {
        Self {
            clocks,
            crashed: BTreeSet::new(),
        }
    }

    pub fn with_crashed(clocks: Vec<u64>, crashed: impl IntoIterator<Item = usize>) -> Self {
        Self {
            clocks,
            crashed: crashed.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.clocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clocks.is_empty()
    }

    pub fn is_crashed(&self, p: usize) -> bool {
        self.crashed.contains(&p)
    }

    pub fn validate(&self, graph: &Graph) -> Result<(), ConfigurationError> {
        if self.clocks.len() != graph.len() {
            return Err(ConfigurationError::SizeMismatch {
                expected: graph.len(),
                got: self.clocks.len(),
            });
        }
        if let Some(&p) = self.crashed.iter().find(|&&p| p >= graph.len()) {
            return Err(ConfigurationError::CrashOutOfRange(p));
        }
        Ok(())
    }
}

fn join_ids<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|_| format!("bad value `{t}`")))
        .collect()
}

/// `clocks=1,7,6,7,13 crashed=1`
impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "clocks={} crashed={}",
            join_ids(&self.clocks),
            join_ids(&self.crashed)
        )
    }
}

impl FromStr for Configuration {
    type Err = ConfigurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut clocks = None;
        let mut crashed = BTreeSet::new();
        for token in s.split_whitespace() {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| ConfigurationError::Parse(format!("expected key=value, got `{token}`")))?;
            match key {
                "clocks" => clocks = Some(parse_list(value).map_err(ConfigurationError::Parse)?),
                "crashed" => {
                    crashed = parse_list(value)
                        .map_err(ConfigurationError::Parse)?
                        .into_iter()
                        .collect()
                }
                other => return Err(ConfigurationError::Parse(format!("unknown key `{other}`"))),
            }
        }
        let clocks = clocks.ok_or_else(|| ConfigurationError::Parse("missing clocks=".into()))?;
        Ok(Configuration { clocks, crashed })
    }
}

fn drift(a: u64, b: u64) -> u64 {
    a.abs_diff(b)
}

/// `n` clocks drawn uniformly from `0..=max` by a ChaCha8 stream seeded with
/// `seed`.
pub fn random_clocks(n: usize, seed: u64, max: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..=max)).collect()
}

/// Every pair of neighbors, crashed or not, is within drift 1.
pub fn is_gamma1(graph: &Graph, clocks: &[u64]) -> bool {
    graph.edges().all(|(u, v)| drift(clocks[u], clocks[v]) <= 1)
}

/// Drift bound restricted to edges between two correct processors.
pub fn is_gamma1_star(graph: &Graph, c: &Configuration) -> bool {
    graph
        .edges()
        .filter(|(u, v)| !c.is_crashed(*u) && !c.is_crashed(*v))
        .all(|(u, v)| drift(c.clocks[u], c.clocks[v]) <= 1)
}

pub fn edge_drift(clocks: &[u64], edge: (usize, usize)) -> u64 {
    drift(clocks[edge.0], clocks[edge.1])
}

/// Largest drift over the edges incident to `p`; 0 for an isolated node.
pub fn node_max_drift(graph: &Graph, clocks: &[u64], p: usize) -> u64 {
    graph
        .neighbors(p)
        .iter()
        .map(|&q| drift(clocks[p], clocks[q]))
        .max()
        .unwrap_or(0)
}

/// Number of edges at each drift value `d >= 2`.
///
/// Ordered lexicographically from the highest drift down, which is the same
/// as comparing the zero-padded tuples `(..., 0, count(k), ..., count(2))`.
/// The empty potential is the minimum and is reached exactly on Γ1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Potential {
    counts: BTreeMap<u64, usize>,
}

impl Potential {
    pub fn from_counts(counts: impl IntoIterator<Item = (u64, usize)>) -> Self {
        let mut map = BTreeMap::new();
        for (d, c) in counts {
            if d >= 2 && c > 0 {
                *map.entry(d).or_insert(0) += c;
            }
        }
        Potential { counts: map }
    }

    pub fn is_zero(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, drift: u64) -> usize {
        self.counts.get(&drift).copied().unwrap_or(0)
    }

    pub fn max_drift(&self) -> Option<u64> {
        self.counts.keys().next_back().copied()
    }

    pub fn counts(&self) -> &BTreeMap<u64, usize> {
        &self.counts
    }
}

impl Ord for Potential {
    fn cmp(&self, other: &Self) -> Ordering {
        let mut a = self.counts.iter().rev().peekable();
        let mut b = other.counts.iter().rev().peekable();
        loop {
            match (a.peek(), b.peek()) {
                (None, None) => return Ordering::Equal,
                (Some(_), None) => return Ordering::Greater,
                (None, Some(_)) => return Ordering::Less,
                (Some(&(da, ca)), Some(&(db, cb))) => {
                    match da.cmp(db) {
                        // The side holding the higher drift has a non-zero entry
                        // where the other has zero.
                        Ordering::Greater => return Ordering::Greater,
                        Ordering::Less => return Ordering::Less,
                        Ordering::Equal => match ca.cmp(cb) {
                            Ordering::Equal => {
                                a.next();
                                b.next();
                            }
                            unequal => return unequal,
                        },
                    }
                }
            }
        }
    }
}

impl PartialOrd for Potential {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<_> = self
            .counts
            .iter()
            .rev()
            .map(|(d, c)| format!("{d}:{c}"))
            .collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

pub fn potential(graph: &Graph, clocks: &[u64]) -> Potential {
    Potential::from_counts(graph.edges().map(|e| (edge_drift(clocks, e), 1)))
}

pub fn potential_less(a: &Potential, b: &Potential) -> bool {
    a < b
}

/// Shifts all clocks down so that the minimum becomes 1, unless some clock is
/// already 0 (or the minimum is already 1), in which case nothing changes.
///
/// The protocol only treats clock 0 specially, so any configuration with no
/// zero clock behaves identically to its shifted form. Returns the amount
/// subtracted.
pub fn canonicalize_clocks(clocks: &mut [u64]) -> u64 {
    let min = clocks.iter().copied().min().unwrap_or(0);
    if min <= 1 {
        return 0;
    }
    let shift = min - 1;
    for c in clocks.iter_mut() {
        *c -= shift;
    }
    shift
}

pub fn canonicalize(c: &Configuration) -> (Configuration, u64) {
    let mut out = c.clone();
    let shift = canonicalize_clocks(&mut out.clocks);
    (out, shift)
}

/// Minimum clock in {0, 1}.
pub fn is_canonical(clocks: &[u64]) -> bool {
    clocks.iter().copied().min().unwrap_or(0) <= 1
}

pub fn span(clocks: &[u64]) -> u64 {
    let min = clocks.iter().copied().min().unwrap_or(0);
    let max = clocks.iter().copied().max().unwrap_or(0);
    max - min
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain(n: usize) -> Graph {
        Graph::chain(n).unwrap()
    }

    /// Pairwise drift check over every (p, q) with q a neighbor of p, written
    /// independently of the edge iterator.
    fn gamma1_by_hand(g: &Graph, c: &Configuration, only_correct: bool) -> bool {
        for p in 0..g.len() {
            for &q in g.neighbors(p) {
                if only_correct && (c.is_crashed(p) || c.is_crashed(q)) {
                    continue;
                }
                let (a, b) = (c.clocks[p] as i64, c.clocks[q] as i64);
                if (a - b).abs() > 1 {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn gamma1_examples() {
        let c = Configuration::with_crashed(vec![0, 2, 2], [0]);
        assert!(!is_gamma1(&chain(3), &c.clocks));
        assert!(is_gamma1_star(&chain(3), &c));
        let no_crash = Configuration::new(vec![0, 2, 2]);
        assert!(!is_gamma1_star(&chain(3), &no_crash));

        assert!(is_gamma1(&chain(5), &[3, 4, 4, 4, 4]));
        assert!(is_gamma1(&Graph::ring(6).unwrap(), &[9; 6]));

        let c = Configuration::with_crashed(vec![5, 7], [0]);
        assert!(is_gamma1_star(&chain(2), &c));
        assert_eq!(is_gamma1_star(&chain(2), &c), gamma1_by_hand(&chain(2), &c, true));
        let both = Configuration::with_crashed(vec![5, 7], [0, 1]);
        assert!(is_gamma1_star(&chain(2), &both));
    }

    #[test]
    fn drifts() {
        let clocks = [1, 7, 6, 7, 13];
        assert_eq!(edge_drift(&clocks, (0, 1)), 6);
        assert_eq!(edge_drift(&clocks, (3, 4)), 6);
        assert_eq!(node_max_drift(&chain(5), &clocks, 2), 1);
        assert_eq!(node_max_drift(&chain(1), &[4], 0), 0);
        let g1 = [3, 4, 4, 4, 4];
        assert!(chain(5).edges().all(|e| edge_drift(&g1, e) <= 1));
    }

    #[test]
    fn potential_examples() {
        let p = potential(&chain(5), &[1, 7, 6, 7, 13]);
        assert_eq!(p, Potential::from_counts([(6, 2)]));
        assert_eq!(p.to_string(), "{6:2}");
        let zero = potential(&chain(5), &[3, 4, 4, 4, 4]);
        assert!(zero.is_zero());
        assert!(potential_less(&zero, &p));
        assert!(potential_less(
            &Potential::from_counts([(5, 9)]),
            &Potential::from_counts([(6, 1)])
        ));
        // Step of the first figure: (1,3,6,7,6) has drifts 2, 3, 1, 1.
        let after = potential(&chain(5), &[1, 3, 6, 7, 6]);
        assert_eq!(after, Potential::from_counts([(3, 1), (2, 1)]));
        assert!(after < p);
    }

    #[test]
    fn canonicalize_examples() {
        let (c, s) = canonicalize(&Configuration::new(vec![5, 7, 6]));
        assert_eq!((c.clocks, s), (vec![1, 3, 2], 4));
        let (c, s) = canonicalize(&Configuration::new(vec![0, 1, 2]));
        assert_eq!((c.clocks, s), (vec![0, 1, 2], 0));
        let (c, s) = canonicalize(&Configuration::with_crashed(vec![3, 3], [1]));
        assert_eq!((c.clocks.clone(), s), (vec![1, 1], 2));
        assert!(c.is_crashed(1));
    }

    #[test]
    fn random_clocks_are_seeded() {
        let a = random_clocks(6, 42, 10);
        assert_eq!(a, random_clocks(6, 42, 10));
        assert_ne!(a, random_clocks(6, 43, 10));
        assert!(a.iter().all(|&c| c <= 10));
    }

    #[test]
    fn literal_round_trip() {
        let c: Configuration = "clocks=1,7,6,7,13 crashed=1".parse().unwrap();
        assert_eq!(c.clocks, vec![1, 7, 6, 7, 13]);
        assert!(c.is_crashed(1));
        assert_eq!(c.to_string(), "clocks=1,7,6,7,13 crashed=1");
        let empty: Configuration = "clocks=0,1 crashed=".parse().unwrap();
        assert!(empty.crashed.is_empty());
        assert!("crashed=1".parse::<Configuration>().is_err());
        assert!("clocks=1,x".parse::<Configuration>().is_err());
        assert!(c.validate(&chain(5)).is_ok());
        assert!(c.validate(&chain(4)).is_err());
        let bad = Configuration::with_crashed(vec![0, 0], [7]);
        assert_eq!(bad.validate(&chain(2)), Err(ConfigurationError::CrashOutOfRange(7)));
    }

    fn all_clock_vectors(n: usize, max: u64) -> Vec<Vec<u64>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|v| {
                    (0..=max).map(move |x| {
                        let mut w = v.clone();
                        w.push(x);
                        w
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn exhaustive_gamma1_and_potential() {
        for g in [chain(4), Graph::ring(4).unwrap()] {
            for clocks in all_clock_vectors(4, 4) {
                let plain = Configuration::new(clocks.clone());
                let g1 = is_gamma1(&g, &clocks);
                assert_eq!(g1, gamma1_by_hand(&g, &plain, false));
                assert_eq!(potential(&g, &clocks).is_zero(), g1);
                for crashed in 0..4 {
                    let c = Configuration::with_crashed(clocks.clone(), [crashed]);
                    let star = is_gamma1_star(&g, &c);
                    assert_eq!(star, gamma1_by_hand(&g, &c, true));
                    assert!(!g1 || star);
                }
            }
        }
    }

    fn arb_potential() -> impl Strategy<Value = Potential> {
        proptest::collection::btree_map(2u64..8, 1usize..4, 0..4).prop_map(Potential::from_counts)
    }

    proptest! {
        #[test]
        fn potential_order_is_strict_total(a in arb_potential(), b in arb_potential(), c in arb_potential()) {
            prop_assert!(!(a < a));
            let lt = a < b;
            let gt = b < a;
            let eq = a == b;
            prop_assert_eq!(u8::from(lt) + u8::from(gt) + u8::from(eq), 1);
            if a < b && b < c {
                prop_assert!(a < c);
            }
        }

        #[test]
        fn canonicalize_preserves_differences(clocks in proptest::collection::vec(0u64..1000, 1..8)) {
            let c = Configuration::with_crashed(clocks.clone(), [0]);
            let (canon, shift) = canonicalize(&c);
            prop_assert_eq!(&canon.crashed, &c.crashed);
            prop_assert!(is_canonical(&canon.clocks));
            for (x, y) in canon.clocks.iter().zip(&clocks) {
                prop_assert_eq!(x + shift, *y);
            }
            prop_assert_eq!(span(&canon.clocks), span(&clocks));
        }
    }
}
