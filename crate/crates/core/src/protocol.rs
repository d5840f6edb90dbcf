//! The fault-tolerant unison protocol and the guarded-command interface the
//! engine and checker drive it through.
//!
//! Each processor owns a single clock. From its neighbors' clocks it computes
//! the interval of values that would be within drift 1 of all of them, and:
//!
//! * `N`  — interval has at least two values: step to `h+1` if allowed,
//!   otherwise jump to the interval minimum;
//! * `C1` — interval is empty: move to the floor of the neighbor average,
//!   unless already at its floor or ceiling;
//! * `C2` — interval is a single value different from the own clock: take it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::topology::Graph;

/// An integer interval of clock values, possibly empty or unbounded.
///
/// `Unbounded` is the intersection over an empty neighbor set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockInterval {
    Empty,
    Range { lo: u64, hi: u64 },
    Unbounded,
}

impl ClockInterval {
    pub fn range(lo: u64, hi: u64) -> Self {
        if lo <= hi {
            ClockInterval::Range { lo, hi }
        } else {
            ClockInterval::Empty
        }
    }

    /// Number of values; `None` when unbounded.
    pub fn size(&self) -> Option<u64> {
        match *self {
            ClockInterval::Empty => Some(0),
            ClockInterval::Range { lo, hi } => Some(hi - lo + 1),
            ClockInterval::Unbounded => None,
        }
    }

    pub fn contains(&self, h: u64) -> bool {
        match *self {
            ClockInterval::Empty => false,
            ClockInterval::Range { lo, hi } => lo <= h && h <= hi,
            ClockInterval::Unbounded => true,
        }
    }

    pub fn intersect(self, other: Self) -> Self {
        match (self, other) {
            (ClockInterval::Empty, _) | (_, ClockInterval::Empty) => ClockInterval::Empty,
            (ClockInterval::Unbounded, x) | (x, ClockInterval::Unbounded) => x,
            (ClockInterval::Range { lo: a, hi: b }, ClockInterval::Range { lo: c, hi: d }) => {
                ClockInterval::range(a.max(c), b.min(d))
            }
        }
    }

    fn at_least_two(&self) -> bool {
        self.size().map_or(true, |s| s >= 2)
    }
}

/// Values within drift 1 of a neighbor showing `h`.
pub fn poss(h: u64) -> ClockInterval {
    ClockInterval::range(h.saturating_sub(1), h + 1)
}

pub fn inter(neighbor_clocks: impl IntoIterator<Item = u64>) -> ClockInterval {
    neighbor_clocks
        .into_iter()
        .fold(ClockInterval::Unbounded, |acc, h| acc.intersect(poss(h)))
}

/// `h+1` if it lies in the interval, otherwise the interval minimum.
///
/// # Panics
/// On an empty interval.
pub fn next(interval: ClockInterval, h: u64) -> u64 {
    match interval {
        ClockInterval::Empty => panic!("next() on an empty interval"),
        ClockInterval::Unbounded => h + 1,
        ClockInterval::Range { lo, hi } => {
            if lo <= h + 1 && h < hi {
                h + 1
            } else {
                lo
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    N,
    C1,
    C2,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::N => "N",
            Rule::C1 => "C1",
            Rule::C2 => "C2",
        })
    }
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "N" => Ok(Rule::N),
            "C1" => Ok(Rule::C1),
            "C2" => Ok(Rule::C2),
            other => Err(format!("unknown rule `{other}`")),
        }
    }
}

/// Outcome of evaluating a processor's guards. The only thing a rule can
/// write is the clock, so the decision carries nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleDecision {
    NotEnabled,
    Fire { rule: Rule, value: u64 },
}

impl RuleDecision {
    pub fn is_enabled(&self) -> bool {
        matches!(self, RuleDecision::Fire { .. })
    }

    pub fn rule(&self) -> Option<Rule> {
        match *self {
            RuleDecision::Fire { rule, .. } => Some(rule),
            RuleDecision::NotEnabled => None,
        }
    }

    pub fn value(&self) -> Option<u64> {
        match *self {
            RuleDecision::Fire { value, .. } => Some(value),
            RuleDecision::NotEnabled => None,
        }
    }
}

/// A deterministic guarded-command protocol over a single clock variable.
///
/// Implementations must only read `clocks[p]` and the clocks of `p`'s
/// neighbors; [`locality_check`] probes that.
pub trait Protocol: Sync {
    fn decide(&self, graph: &Graph, clocks: &[u64], p: usize) -> RuleDecision;
}

impl<F> Protocol for F
where
    F: Fn(&Graph, &[u64], usize) -> RuleDecision + Sync,
{
    fn decide(&self, graph: &Graph, clocks: &[u64], p: usize) -> RuleDecision {
        self(graph, clocks, p)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Uftss;

impl Protocol for Uftss {
    fn decide(&self, graph: &Graph, clocks: &[u64], p: usize) -> RuleDecision {
        let neighbors = graph.neighbors(p);
        let h = clocks[p];
        let allowed = inter(neighbors.iter().map(|&q| clocks[q]));
        match allowed {
            a if a.at_least_two() => RuleDecision::Fire {
                rule: Rule::N,
                value: next(a, h),
            },
            ClockInterval::Empty => {
                let sum: u64 = neighbors.iter().map(|&q| clocks[q]).sum();
                let deg = neighbors.len() as u64;
                let floor = sum / deg;
                let ceil = sum.div_ceil(deg);
                if h != floor && h != ceil {
                    RuleDecision::Fire {
                        rule: Rule::C1,
                        value: floor,
                    }
                } else {
                    RuleDecision::NotEnabled
                }
            }
            ClockInterval::Range { lo, .. } => {
                // Exactly one value left.
                if h != lo {
                    RuleDecision::Fire {
                        rule: Rule::C2,
                        value: lo,
                    }
                } else {
                    RuleDecision::NotEnabled
                }
            }
            ClockInterval::Unbounded => unreachable!("unbounded interval has at least two values"),
        }
    }
}

/// Perturbs every clock outside `{p} ∪ N_p` `trials` times and reports
/// whether the decision for `p` ever changed.
pub fn locality_check<P: Protocol + ?Sized, R: Rng>(
    protocol: &P,
    graph: &Graph,
    clocks: &[u64],
    p: usize,
    trials: usize,
    rng: &mut R,
) -> bool {
    let reference = protocol.decide(graph, clocks, p);
    let far: Vec<usize> = (0..graph.len())
        .filter(|&q| q != p && !graph.are_neighbors(p, q))
        .collect();
    if far.is_empty() {
        return true;
    }
    let mut probe = clocks.to_vec();
    for _ in 0..trials {
        for &q in &far {
            probe[q] = rng.gen_range(0..=clocks[q].saturating_mul(2) + 16);
        }
        if protocol.decide(graph, &probe, p) != reference {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decide(g: &Graph, clocks: &[u64], p: usize) -> RuleDecision {
        Uftss.decide(g, clocks, p)
    }

    fn fire(rule: Rule, value: u64) -> RuleDecision {
        RuleDecision::Fire { rule, value }
    }

    #[test]
    fn poss_values() {
        assert_eq!(poss(7), ClockInterval::range(6, 8));
        assert_eq!(poss(0), ClockInterval::range(0, 1));
        assert_eq!(poss(1), ClockInterval::range(0, 2));
    }

    #[test]
    fn inter_values() {
        assert_eq!(inter([1, 6]), ClockInterval::Empty);
        assert_eq!(inter([3, 5]), ClockInterval::range(4, 4));
        assert_eq!(inter([0, 2]), ClockInterval::range(1, 1));
        assert_eq!(inter([]), ClockInterval::Unbounded);
        assert_eq!(inter([4]).size(), Some(3));
    }

    #[test]
    fn next_values() {
        assert_eq!(next(ClockInterval::range(6, 8), 13), 6);
        assert_eq!(next(ClockInterval::range(2, 4), 1), 2);
        assert_eq!(next(ClockInterval::range(3, 4), 3), 4);
        assert_eq!(next(ClockInterval::Unbounded, 9), 10);
    }

    #[test]
    #[should_panic]
    fn next_on_empty_panics() {
        next(ClockInterval::Empty, 3);
    }

    #[test]
    fn decide_examples() {
        let c5 = Graph::chain(5).unwrap();
        assert_eq!(decide(&c5, &[1, 7, 6, 7, 13], 1), fire(Rule::C1, 3));
        assert_eq!(decide(&c5, &[1, 7, 6, 7, 13], 4), fire(Rule::N, 6));
        assert_eq!(decide(&c5, &[1, 7, 6, 7, 13], 3), fire(Rule::C1, 9));
        assert_eq!(decide(&c5, &[6, 7, 6, 9, 13], 3), RuleDecision::NotEnabled);
        assert_eq!(decide(&c5, &[4, 5, 6, 2, 2], 1), RuleDecision::NotEnabled);
        assert_eq!(decide(&Graph::chain(2).unwrap(), &[4, 4], 0), fire(Rule::N, 5));
        // C1 guard false: clock already on the floor or ceiling of the average.
        assert_eq!(decide(&c5, &[1, 3, 6, 0, 0], 1), RuleDecision::NotEnabled);
        assert_eq!(decide(&c5, &[1, 4, 6, 0, 0], 1), RuleDecision::NotEnabled);
        // Isolated node keeps incrementing.
        assert_eq!(decide(&Graph::chain(1).unwrap(), &[3], 0), fire(Rule::N, 4));
        // Degree 3 uses |N_p| as divisor: (0 + 9 + 10) / 3 = 6.33.
        let y = Graph::y_network(0);
        assert_eq!(decide(&y, &[0, 2, 9, 10], 1), fire(Rule::C1, 6));
    }

    fn all_clock_vectors(n: usize, max: u64) -> Vec<Vec<u64>> {
        (0..(max + 1).pow(n as u32))
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let d = code % (max + 1);
                        code /= max + 1;
                        d
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn guard_exclusivity_and_minimality_exhaustive() {
        for g in [Graph::chain(4).unwrap(), Graph::ring(4).unwrap()] {
            for clocks in all_clock_vectors(4, 4) {
                for p in 0..4 {
                    let ns: Vec<u64> = g.neighbors(p).iter().map(|&q| clocks[q]).collect();
                    let i = inter(ns.iter().copied());
                    let size = i.size().unwrap();
                    let sum: u64 = ns.iter().sum();
                    let avg_lo = sum / ns.len() as u64;
                    let avg_hi = sum.div_ceil(ns.len() as u64);
                    let h = clocks[p];
                    let n_guard = size >= 2;
                    let c1_guard = size == 0 && h != avg_lo && h != avg_hi;
                    let c2_guard = size == 1 && !i.contains(h);
                    let guards = [n_guard, c1_guard, c2_guard];
                    assert!(guards.iter().filter(|&&x| x).count() <= 1);
                    let d = decide(&g, &clocks, p);
                    let expected = match guards {
                        [true, _, _] => Some(Rule::N),
                        [_, true, _] => Some(Rule::C1),
                        [_, _, true] => Some(Rule::C2),
                        _ => None,
                    };
                    assert_eq!(d.rule(), expected, "{clocks:?} p{p}");
                    if let Some(v) = d.value() {
                        assert_ne!(v, h, "a firing rule must change the clock");
                    }
                }
            }
        }
    }

    #[test]
    fn priority_exhaustive() {
        for g in [Graph::chain(4).unwrap(), Graph::ring(4).unwrap(), Graph::ring(3).unwrap()] {
            for clocks in all_clock_vectors(g.len(), 4) {
                for p in 0..g.len() {
                    let h = clocks[p];
                    if g.neighbors(p).iter().all(|&q| clocks[q] == h || clocks[q] == h + 1) {
                        assert_eq!(decide(&g, &clocks, p), fire(Rule::N, h + 1));
                    }
                }
            }
        }
    }

    #[test]
    fn writes_from_gamma1_stay_in_gamma1() {
        for g in [Graph::chain(4).unwrap(), Graph::ring(4).unwrap()] {
            for clocks in all_clock_vectors(4, 4) {
                if !crate::configuration::is_gamma1(&g, &clocks) {
                    continue;
                }
                for p in 0..4 {
                    if let RuleDecision::Fire { rule, value } = decide(&g, &clocks, p) {
                        assert_eq!(rule, Rule::N);
                        assert!(g.neighbors(p).iter().all(|&q| value.abs_diff(clocks[q]) <= 1));
                    }
                }
            }
        }
    }

    #[test]
    fn blocked_between_minus_and_plus_one() {
        let c3 = Graph::chain(3).unwrap();
        assert_eq!(decide(&c3, &[0, 1, 2], 1), RuleDecision::NotEnabled);
        for h in 1..50 {
            assert_eq!(decide(&c3, &[h - 1, h, h + 1], 1), RuleDecision::NotEnabled);
            assert_eq!(decide(&c3, &[h + 1, h, h - 1], 1), RuleDecision::NotEnabled);
        }
    }

    #[test]
    fn locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in [Graph::chain(5).unwrap(), Graph::ring(5).unwrap()] {
            for _ in 0..200 {
                let clocks: Vec<u64> = (0..5).map(|_| rng.gen_range(0..12)).collect();
                for p in 0..5 {
                    assert!(locality_check(&Uftss, &g, &clocks, p, 20, &mut rng));
                }
            }
        }
        let peeking = |g: &Graph, clocks: &[u64], p: usize| {
            let far = (p + 2) % g.len();
            RuleDecision::Fire {
                rule: Rule::N,
                value: clocks[far] + 1,
            }
        };
        let g = Graph::chain(5).unwrap();
        assert!(!locality_check(&peeking, &g, &[1, 2, 3, 4, 5], 0, 20, &mut rng));
    }

    proptest! {
        #[test]
        fn normal_rule_always_changes_clock(lo in 0u64..100, len in 1u64..5, h in 0u64..110) {
            // Any interval with at least two values: next() is h+1 or lo, and
            // lo == h implies h+1 <= hi.
            let i = ClockInterval::range(lo, lo + len);
            prop_assert_ne!(next(i, h), h);
            prop_assert!(i.contains(next(i, h)));
        }

        #[test]
        fn decisions_are_deterministic(clocks in proptest::collection::vec(0u64..30, 5), p in 0usize..5) {
            let g = Graph::ring(5).unwrap();
            prop_assert_eq!(decide(&g, &clocks, p), decide(&g, &clocks, p));
        }
    }
}
