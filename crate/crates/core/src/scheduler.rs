//! Daemons and selection policies.
//!
//! A [`Daemon`] says which subsets of the enabled processors are legal in one
//! step; a [`Policy`] picks one of them. Fairness is never enforced directly:
//! policies realize it operationally (LRU is strongly fair, scripts can be as
//! unfair as they like) and [`classify_cycle`] judges a finished lasso.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::configuration::Configuration;
use crate::protocol::Protocol;
use crate::topology::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Daemon {
    Central,
    LocallyCentral,
    Distributed,
    Synchronous,
}

impl Daemon {
    /// Whether `selection` is a legal choice among `enabled`.
    pub fn is_legal(&self, graph: &Graph, enabled: &[usize], selection: &[usize]) -> bool {
        if selection.is_empty() || !selection.iter().all(|p| enabled.contains(p)) {
            return false;
        }
        if selection.iter().enumerate().any(|(i, p)| selection[i + 1..].contains(p)) {
            return false;
        }
        match self {
            Daemon::Central => selection.len() == 1,
            Daemon::LocallyCentral => independent(graph, selection),
            Daemon::Distributed => true,
            Daemon::Synchronous => selection.len() == enabled.len(),
        }
    }
}

fn independent(graph: &Graph, set: &[usize]) -> bool {
    set.iter()
        .enumerate()
        .all(|(i, &p)| set[i + 1..].iter().all(|&q| !graph.are_neighbors(p, q)))
}

impl fmt::Display for Daemon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Daemon::Central => "central",
            Daemon::LocallyCentral => "locally-central",
            Daemon::Distributed => "distributed",
            Daemon::Synchronous => "synchronous",
        })
    }
}

impl FromStr for Daemon {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "central" => Ok(Daemon::Central),
            "locally-central" => Ok(Daemon::LocallyCentral),
            "distributed" => Ok(Daemon::Distributed),
            "synchronous" => Ok(Daemon::Synchronous),
            other => Err(format!("unknown daemon `{other}`")),
        }
    }
}

/// Step index at which each processor last executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct History {
    last_executed: Vec<Option<usize>>,
}

impl History {
    pub fn new(n: usize) -> Self {
        Self {
            last_executed: vec![None; n],
        }
    }

    pub fn record(&mut self, step: usize, selected: &[usize]) {
        for &p in selected {
            self.last_executed[p] = Some(step);
        }
    }

    pub fn last_executed(&self, p: usize) -> Option<usize> {
        self.last_executed[p]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Policy {
    /// Least recently executed first, ties broken by ascending id.
    Lru,
    RoundRobin,
    Random(u64),
    Script(Vec<Vec<usize>>),
}

impl Policy {
    /// Seed recorded in trace headers (0 for deterministic policies).
    pub fn seed(&self) -> u64 {
        match self {
            Policy::Random(s) => *s,
            _ => 0,
        }
    }
}

/// Parses a selection script: one step per line, comma-separated ids.
/// Blank lines and `#` comments are skipped.
pub fn parse_script(text: &str) -> Result<Vec<Vec<usize>>, String> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| format!("script line {}: bad processor id `{t}`", i + 1))
                })
                .collect()
        })
        .collect()
}

pub fn format_script(steps: &[Vec<usize>]) -> String {
    steps
        .iter()
        .map(|s| {
            let ids: Vec<_> = s.iter().map(|p| p.to_string()).collect();
            ids.join(",") + "\n"
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("script step {step}: {reason}")]
    ScriptViolation { step: usize, reason: String },
}

/// A policy together with its mutable state for one run.
#[derive(Debug, Clone)]
pub struct Selector {
    policy: Policy,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Selector {
    pub fn new(policy: Policy) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(policy.seed());
        Self {
            policy,
            cursor: 0,
            rng,
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// Chooses the processors to activate at `step`.
    ///
    /// `enabled` must be sorted, non-empty and free of crashed processors.
    /// Returns `Ok(None)` once a script runs out of steps.
    pub fn select(
        &mut self,
        daemon: Daemon,
        graph: &Graph,
        config: &Configuration,
        enabled: &[usize],
        history: &History,
        step: usize,
    ) -> Result<Option<Vec<usize>>, ScheduleError> {
        debug_assert!(!enabled.is_empty());
        let selection = match &self.policy {
            Policy::Lru => {
                let mut order = enabled.to_vec();
                order.sort_by_key(|&p| (history.last_executed(p).map_or(0, |s| s + 1), p));
                greedy(daemon, graph, &order)
            }
            Policy::RoundRobin => {
                let n = graph.len();
                let start = self.cursor;
                let mut order = enabled.to_vec();
                order.sort_by_key(|&p| (p + n - start) % n);
                let chosen = greedy(daemon, graph, &order);
                self.cursor = (chosen[0] + 1) % n;
                chosen
            }
            Policy::Random(_) => match daemon {
                Daemon::Distributed => loop {
                    let pick: Vec<usize> = enabled
                        .iter()
                        .copied()
                        .filter(|_| self.rng.gen_bool(0.5))
                        .collect();
                    if !pick.is_empty() {
                        break pick;
                    }
                },
                _ => {
                    let mut order = enabled.to_vec();
                    order.shuffle(&mut self.rng);
                    greedy(daemon, graph, &order)
                }
            },
            Policy::Script(steps) => {
                let Some(wanted) = steps.get(step) else {
                    return Ok(None);
                };
                let violation = |reason: String| ScheduleError::ScriptViolation { step, reason };
                if wanted.is_empty() {
                    return Err(violation("empty selection".into()));
                }
                for &p in wanted {
                    if p >= graph.len() {
                        return Err(violation(format!("processor {p} does not exist")));
                    }
                    if config.is_crashed(p) {
                        return Err(violation(format!("processor {p} is crashed")));
                    }
                    if !enabled.contains(&p) {
                        return Err(violation(format!("processor {p} is not enabled")));
                    }
                }
                if !daemon.is_legal(graph, enabled, wanted) {
                    return Err(violation(format!("selection {wanted:?} violates the {daemon} daemon")));
                }
                let mut s = wanted.clone();
                s.sort_unstable();
                s
            }
        };
        debug_assert!(daemon.is_legal(graph, enabled, &selection));
        let mut selection = selection;
        selection.sort_unstable();
        Ok(Some(selection))
    }
}

/// Takes candidates in order, keeping a maximal legal set for the daemon.
fn greedy(daemon: Daemon, graph: &Graph, order: &[usize]) -> Vec<usize> {
    match daemon {
        Daemon::Central => vec![order[0]],
        Daemon::Distributed | Daemon::Synchronous => order.to_vec(),
        Daemon::LocallyCentral => {
            let mut chosen: Vec<usize> = Vec::new();
            for &p in order {
                if chosen.iter().all(|&q| !graph.are_neighbors(p, q)) {
                    chosen.push(p);
                }
            }
            chosen
        }
    }
}

/// Which fairness assumptions admit an ultimately periodic execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FairnessVerdict {
    pub strongly_fair_admissible: bool,
    pub weakly_fair_admissible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fairness {
    Strong,
    Weak,
}

impl FairnessVerdict {
    pub fn admits(&self, fairness: Fairness) -> bool {
        match fairness {
            Fairness::Strong => self.strongly_fair_admissible,
            Fairness::Weak => self.weakly_fair_admissible,
        }
    }
}

impl FromStr for Fairness {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strong" => Ok(Fairness::Strong),
            "weak" => Ok(Fairness::Weak),
            other => Err(format!("unknown fairness `{other}`")),
        }
    }
}

impl fmt::Display for Fairness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fairness::Strong => "strong",
            Fairness::Weak => "weak",
        })
    }
}

/// Judges a repeated cycle given, for each configuration of the cycle, the
/// set of enabled processors, and for each step the processors it executed.
///
/// Strongly fair: anyone enabled somewhere in the cycle executes in it.
/// Weakly fair: anyone enabled everywhere in the cycle executes in it.
pub fn classify_cycle(enabled: &[BTreeSet<usize>], executed: &[Vec<usize>]) -> FairnessVerdict {
    let ran: BTreeSet<usize> = executed.iter().flatten().copied().collect();
    let sometimes: BTreeSet<usize> = enabled.iter().flatten().copied().collect();
    let always: BTreeSet<usize> = match enabled.split_first() {
        Some((first, rest)) => rest
            .iter()
            .fold(first.clone(), |acc, s| acc.intersection(s).copied().collect()),
        None => BTreeSet::new(),
    };
    FairnessVerdict {
        strongly_fair_admissible: sometimes.is_subset(&ran),
        weakly_fair_admissible: always.is_subset(&ran),
    }
}

/// Correct processors whose guard holds in `config`.
pub fn enabled_set<P: Protocol + ?Sized>(protocol: &P, graph: &Graph, config: &Configuration) -> Vec<usize> {
    enabled_in(protocol, graph, &config.clocks, |p| config.is_crashed(p))
}

pub(crate) fn enabled_in<P: Protocol + ?Sized>(
    protocol: &P,
    graph: &Graph,
    clocks: &[u64],
    crashed: impl Fn(usize) -> bool,
) -> Vec<usize> {
    (0..graph.len())
        .filter(|&p| !crashed(p) && protocol.decide(graph, clocks, p).is_enabled())
        .collect()
}

/// `p` was enabled before the step, is not after it, and did not execute.
pub fn neutralized<P: Protocol + ?Sized>(
    protocol: &P,
    graph: &Graph,
    before: &Configuration,
    after: &Configuration,
    p: usize,
    executed: bool,
) -> bool {
    if executed || before.is_crashed(p) {
        return false;
    }
    protocol.decide(graph, &before.clocks, p).is_enabled()
        && (after.is_crashed(p) || !protocol.decide(graph, &after.clocks, p).is_enabled())
}
