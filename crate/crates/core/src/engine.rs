//! Step semantics, crash injection, the run loop and recorded traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::configuration::{is_gamma1, parse_list, Configuration, ConfigurationError};
use crate::protocol::{Protocol, Rule, RuleDecision};
use crate::scheduler::{
    classify_cycle, enabled_set, Daemon, FairnessVerdict, History, Policy, ScheduleError, Selector,
};
use crate::topology::{Graph, Topology, TopologyError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("illegal step: processor {processor} {reason}")]
    IllegalStep { processor: usize, reason: &'static str },
    #[error("empty selection")]
    EmptySelection,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("crash plan: {0}")]
    CrashPlan(String),
    #[error("trace line {line}: {msg}")]
    TraceParse { line: usize, msg: String },
    #[error("replay diverged at step {step}: {msg}")]
    ReplayMismatch { step: usize, msg: String },
    #[error("not a lasso: {0}")]
    NotALasso(String),
}

/// Applies one atomic step: every selected processor writes the value its
/// rule computed from the pre-state.
pub fn step<P: Protocol + ?Sized>(
    protocol: &P,
    graph: &Graph,
    config: &Configuration,
    selected: &[usize],
) -> Result<(Configuration, Vec<(usize, Rule)>), EngineError> {
    let (clocks, fired) = apply(protocol, graph, &config.clocks, |p| config.is_crashed(p), selected)?;
    Ok((
        Configuration {
            clocks,
            crashed: config.crashed.clone(),
        },
        fired,
    ))
}

fn apply<P: Protocol + ?Sized>(
    protocol: &P,
    graph: &Graph,
    clocks: &[u64],
    is_crashed: impl Fn(usize) -> bool,
    selected: &[usize],
) -> Result<(Vec<u64>, Vec<(usize, Rule)>), EngineError> {
    if selected.is_empty() {
        return Err(EngineError::EmptySelection);
    }
    let mut next = clocks.to_vec();
    let mut fired = Vec::with_capacity(selected.len());
    for &p in selected {
        if p >= graph.len() {
            return Err(EngineError::IllegalStep {
                processor: p,
                reason: "does not exist",
            });
        }
        if is_crashed(p) {
            return Err(EngineError::IllegalStep {
                processor: p,
                reason: "is crashed",
            });
        }
        match protocol.decide(graph, clocks, p) {
            RuleDecision::Fire { rule, value } => {
                next[p] = value;
                fired.push((p, rule));
            }
            RuleDecision::NotEnabled => {
                return Err(EngineError::IllegalStep {
                    processor: p,
                    reason: "is not enabled",
                })
            }
        }
    }
    fired.sort_unstable();
    Ok((next, fired))
}

/// Scheduled crashes as `(processor, step)`; step 0 means crashed initially.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrashPlan {
    entries: Vec<(usize, usize)>,
}

impl CrashPlan {
    pub fn new(entries: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, EngineError> {
        let mut entries: Vec<_> = entries.into_iter().collect();
        entries.sort_by_key(|&(p, k)| (k, p));
        let mut seen = BTreeSet::new();
        for &(p, _) in &entries {
            if !seen.insert(p) {
                return Err(EngineError::CrashPlan(format!("processor {p} crashes twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn initial(crashed: impl IntoIterator<Item = usize>) -> Self {
        Self::new(crashed.into_iter().map(|p| (p, 0))).expect("distinct ids")
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Processors crashed at or before step `k`.
    pub fn crashed_by(&self, k: usize) -> BTreeSet<usize> {
        self.entries
            .iter()
            .filter(|&&(_, at)| at <= k)
            .map(|&(p, _)| p)
            .collect()
    }

    pub fn validate(&self, graph: &Graph, max_faults: Option<usize>) -> Result<(), EngineError> {
        if let Some(&(p, _)) = self.entries.iter().find(|&&(p, _)| p >= graph.len()) {
            return Err(EngineError::CrashPlan(format!("processor {p} does not exist")));
        }
        if let Some(f) = max_faults {
            if self.entries.len() > f {
                return Err(EngineError::CrashPlan(format!(
                    "{} crashes exceed the fault bound {f}",
                    self.entries.len()
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for CrashPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<_> = self.entries.iter().map(|(p, k)| format!("{p}@{k}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for CrashPlan {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::new();
        for item in s.split(',').filter(|t| !t.is_empty()) {
            let (p, k) = item.split_once('@').unwrap_or((item, "0"));
            let bad = || EngineError::CrashPlan(format!("bad crash entry `{item}`"));
            entries.push((p.parse().map_err(|_| bad())?, k.parse().map_err(|_| bad())?));
        }
        CrashPlan::new(entries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCondition {
    /// Only the step budget (or a terminal configuration) ends the run.
    MaxSteps,
    Gamma1Reached,
    /// Γ1 held for this many consecutive steps.
    Gamma1StableFor(usize),
    /// Run until terminal; the step budget still applies.
    Terminal,
}

impl FromStr for StopCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max-steps" => Ok(StopCondition::MaxSteps),
            "gamma1" | "gamma1-reached" => Ok(StopCondition::Gamma1Reached),
            "terminal" => Ok(StopCondition::Terminal),
            _ => {
                let w = s
                    .strip_prefix("gamma1-stable:")
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| format!("unknown stop condition `{s}`"))?;
                Ok(StopCondition::Gamma1StableFor(w))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    MaxSteps,
    Gamma1Reached,
    Gamma1Stable,
    /// No correct processor is enabled.
    Terminal,
    ScriptExhausted,
    /// A checker witness whose tail repeats forever.
    Lasso,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::MaxSteps => "max-steps",
            RunStatus::Gamma1Reached => "gamma1-reached",
            RunStatus::Gamma1Stable => "gamma1-stable",
            RunStatus::Terminal => "terminal",
            RunStatus::ScriptExhausted => "script-exhausted",
            RunStatus::Lasso => "lasso",
        })
    }
}

impl FromStr for RunStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "max-steps" => RunStatus::MaxSteps,
            "gamma1-reached" => RunStatus::Gamma1Reached,
            "gamma1-stable" => RunStatus::Gamma1Stable,
            "terminal" => RunStatus::Terminal,
            "script-exhausted" => RunStatus::ScriptExhausted,
            "lasso" => RunStatus::Lasso,
            other => return Err(format!("unknown status `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub selected: Vec<usize>,
    pub fired: Vec<(usize, Rule)>,
    /// Clocks after the step, already reduced by `shift`.
    pub clocks_after: Vec<u64>,
    /// Crashed set in effect during the step.
    pub crashed: Vec<usize>,
    pub gamma1: bool,
    /// Amount subtracted from every clock after the step (checker witnesses).
    pub shift: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub topology: Topology,
    pub daemon: Daemon,
    pub initial: Vec<u64>,
    pub crash_plan: CrashPlan,
    pub policy: String,
    pub seed: u64,
    pub status: RunStatus,
    pub lasso_start: Option<usize>,
    pub steps: Vec<Step>,
}

impl Trace {
    pub fn graph(&self) -> &Graph {
        self.topology.graph()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// γ0 … γ_len, each with the crashed set in effect at that index.
    pub fn configurations(&self) -> Vec<Configuration> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(Configuration {
            clocks: self.initial.clone(),
            crashed: self.crash_plan.crashed_by(0),
        });
        for (k, s) in self.steps.iter().enumerate() {
            out.push(Configuration {
                clocks: s.clocks_after.clone(),
                crashed: self.crash_plan.crashed_by(k + 1),
            });
        }
        out
    }

    pub fn final_clocks(&self) -> &[u64] {
        self.steps.last().map_or(&self.initial, |s| &s.clocks_after)
    }

    /// Re-executes every recorded selection from the initial configuration
    /// and checks that rules, clocks, crash sets and Γ1 flags all agree.
    pub fn replay<P: Protocol + ?Sized>(&self, protocol: &P) -> Result<(), EngineError> {
        let graph = self.graph();
        let mut config = Configuration {
            clocks: self.initial.clone(),
            crashed: self.crash_plan.crashed_by(0),
        };
        config.validate(graph)?;
        for (k, s) in self.steps.iter().enumerate() {
            let mismatch = |msg: String| EngineError::ReplayMismatch { step: k, msg };
            config.crashed = self.crash_plan.crashed_by(k);
            if s.crashed != config.crashed.iter().copied().collect::<Vec<_>>() {
                return Err(mismatch(format!("crashed set {:?} differs from plan", s.crashed)));
            }
            let enabled = enabled_set(protocol, graph, &config);
            if !self.daemon.is_legal(graph, &enabled, &s.selected) {
                return Err(mismatch(format!(
                    "selection {:?} is not legal for the {} daemon (enabled {:?})",
                    s.selected, self.daemon, enabled
                )));
            }
            let (mut next, fired) = step(protocol, graph, &config, &s.selected).map_err(|e| mismatch(e.to_string()))?;
            if fired != s.fired {
                return Err(mismatch(format!("fired {:?}, recorded {:?}", fired, s.fired)));
            }
            if next.clocks.iter().any(|&c| c < s.shift) {
                return Err(mismatch(format!("shift {} exceeds the minimum clock", s.shift)));
            }
            next.clocks.iter_mut().for_each(|c| *c -= s.shift);
            if next.clocks != s.clocks_after {
                return Err(mismatch(format!(
                    "clocks {:?}, recorded {:?}",
                    next.clocks, s.clocks_after
                )));
            }
            if is_gamma1(graph, &next.clocks) != s.gamma1 {
                return Err(mismatch("gamma1 flag disagrees".into()));
            }
            config = next;
        }
        Ok(())
    }

    /// Serializes to the line-oriented trace format.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "topology={} daemon={} init={} crashes={} policy={} seed={} status={}",
            self.topology,
            self.daemon,
            join(&self.initial),
            self.crash_plan,
            self.policy,
            self.seed,
            self.status
        );
        if let Some(l) = self.lasso_start {
            out.push_str(&format!(" lasso_start={l}"));
        }
        out.push('\n');
        for (k, s) in self.steps.iter().enumerate() {
            let rules: Vec<_> = s.fired.iter().map(|(p, r)| format!("{p}:{r}")).collect();
            out.push_str(&format!(
                "step={k} selected={} rules={} clocks={} crashed={} gamma1={}",
                join(&s.selected),
                rules.join(","),
                join(&s.clocks_after),
                join(&s.crashed),
                u8::from(s.gamma1)
            ));
            if s.shift != 0 {
                out.push_str(&format!(" shift={}", s.shift));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the trace format. Blank lines and `#` comment lines are ignored.
    pub fn from_text(text: &str) -> Result<Self, EngineError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(EngineError::TraceParse {
            line: 0,
            msg: "empty trace".into(),
        })?;
        let h = fields(hline, header)?;
        let perr = |line: usize, msg: String| EngineError::TraceParse { line, msg };
        let get = |key: &str| {
            h.get(key)
                .copied()
                .ok_or_else(|| perr(hline, format!("missing header field `{key}`")))
        };
        let topology: Topology = get("topology")?.parse()?;
        let mut trace = Trace {
            daemon: get("daemon")?.parse().map_err(|e| perr(hline, e))?,
            initial: parse_list(get("init")?).map_err(|e| perr(hline, e))?,
            crash_plan: get("crashes")?.parse()?,
            policy: get("policy")?.to_string(),
            seed: get("seed")?.parse().map_err(|_| perr(hline, "bad seed".into()))?,
            status: get("status")?.parse().map_err(|e| perr(hline, e))?,
            lasso_start: match h.get("lasso_start") {
                Some(v) => Some(v.parse().map_err(|_| perr(hline, "bad lasso_start".into()))?),
                None => None,
            },
            topology,
            steps: Vec::new(),
        };
        for (line, body) in lines {
            let f = fields(line, body)?;
            let get = |key: &str| {
                f.get(key)
                    .copied()
                    .ok_or_else(|| perr(line, format!("missing field `{key}`")))
            };
            let k: usize = get("step")?.parse().map_err(|_| perr(line, "bad step index".into()))?;
            if k != trace.steps.len() {
                return Err(perr(line, format!("expected step {}, found {k}", trace.steps.len())));
            }
            let fired = get("rules")?
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    let (p, r) = t.split_once(':').ok_or_else(|| perr(line, format!("bad rule `{t}`")))?;
                    Ok((
                        p.parse().map_err(|_| perr(line, format!("bad rule `{t}`")))?,
                        r.parse().map_err(|e| perr(line, e))?,
                    ))
                })
                .collect::<Result<Vec<_>, EngineError>>()?;
            trace.steps.push(Step {
                selected: parse_list(get("selected")?).map_err(|e| perr(line, e))?,
                fired,
                clocks_after: parse_list(get("clocks")?).map_err(|e| perr(line, e))?,
                crashed: parse_list(get("crashed")?).map_err(|e| perr(line, e))?,
                gamma1: match get("gamma1")? {
                    "0" => false,
                    "1" => true,
                    other => return Err(perr(line, format!("bad gamma1 flag `{other}`"))),
                },
                shift: match f.get("shift") {
                    Some(v) => v.parse().map_err(|_| perr(line, "bad shift".into()))?,
                    None => 0,
                },
            });
        }
        Ok(trace)
    }
}

/// Judges the cycle `steps[cycle_start..]` of a trace whose last
/// configuration equals the one at `cycle_start`.
pub fn classify_lasso<P: Protocol + ?Sized>(
    protocol: &P,
    trace: &Trace,
    cycle_start: usize,
) -> Result<FairnessVerdict, EngineError> {
    if cycle_start >= trace.len() {
        return Err(EngineError::NotALasso(format!(
            "cycle start {cycle_start} leaves an empty cycle in a {}-step trace",
            trace.len()
        )));
    }
    let configs = trace.configurations();
    let (head, last) = (&configs[cycle_start], &configs[trace.len()]);
    if head.clocks != last.clocks || head.crashed != last.crashed {
        return Err(EngineError::NotALasso("the cycle does not close".into()));
    }
    let enabled: Vec<BTreeSet<usize>> = configs[cycle_start..trace.len()]
        .iter()
        .map(|c| enabled_set(protocol, trace.graph(), c).into_iter().collect())
        .collect();
    let executed: Vec<Vec<usize>> = trace.steps[cycle_start..]
        .iter()
        .map(|s| s.selected.clone())
        .collect();
    Ok(classify_cycle(&enabled, &executed))
}

/// Raw clock change of `p` during step `k`, undoing the recorded shift.
pub fn raw_delta(trace: &Trace, k: usize, p: usize) -> i64 {
    let before = if k == 0 { &trace.initial } else { &trace.steps[k - 1].clocks_after };
    let s = &trace.steps[k];
    (s.clocks_after[p] + s.shift) as i64 - before[p] as i64
}

fn fields(line: usize, body: &str) -> Result<BTreeMap<&str, &str>, EngineError> {
    body.split_whitespace()
        .map(|tok| {
            tok.split_once('=').ok_or_else(|| EngineError::TraceParse {
                line,
                msg: format!("expected key=value, got `{tok}`"),
            })
        })
        .collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Everything needed to start a run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub topology: Topology,
    pub initial: Vec<u64>,
    pub crash_plan: CrashPlan,
    pub daemon: Daemon,
    pub policy: Policy,
    /// Recorded in the trace header; defaults to a name derived from `policy`.
    pub policy_descriptor: Option<String>,
    pub max_steps: usize,
    pub stop: StopCondition,
    /// Recorded in the trace header; defaults to the policy's seed.
    pub seed: Option<u64>,
}

impl RunSpec {
    pub fn new(topology: Topology, initial: Vec<u64>, policy: Policy) -> Self {
        Self {
            topology,
            initial,
            crash_plan: CrashPlan::default(),
            daemon: Daemon::LocallyCentral,
            policy,
            policy_descriptor: None,
            max_steps: 1000,
            stop: StopCondition::MaxSteps,
            seed: None,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn crashes(mut self, plan: CrashPlan) -> Self {
        self.crash_plan = plan;
        self
    }

    pub fn daemon(mut self, daemon: Daemon) -> Self {
        self.daemon = daemon;
        self
    }

    pub fn max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn stop(mut self, stop: StopCondition) -> Self {
        self.stop = stop;
        self
    }

    pub fn describe_policy(mut self, descriptor: impl Into<String>) -> Self {
        self.policy_descriptor = Some(descriptor.into());
        self
    }
}

fn default_descriptor(policy: &Policy) -> String {
    match policy {
        Policy::Lru => "lru".into(),
        Policy::RoundRobin => "round-robin".into(),
        Policy::Random(seed) => format!("random:{seed}"),
        Policy::Script(_) => "script".into(),
    }
}

/// Runs the protocol until the stop condition, the step budget, a terminal
/// configuration, or the end of a script.
pub fn run<P: Protocol + ?Sized>(protocol: &P, spec: &RunSpec) -> Result<Trace, EngineError> {
    let graph = spec.topology.graph();
    spec.crash_plan.validate(graph, None)?;
    let mut config = Configuration {
        clocks: spec.initial.clone(),
        crashed: spec.crash_plan.crashed_by(0),
    };
    config.validate(graph)?;

    let mut selector = Selector::new(spec.policy.clone());
    let mut history = History::new(graph.len());
    let mut steps = Vec::new();
    let mut stable = 0usize;
    let mut pending = spec.crash_plan.entries().iter().filter(|&&(_, at)| at > 0).peekable();
    let mut crashed_ids: Vec<usize> = config.crashed.iter().copied().collect();
    let mut in_gamma1 = is_gamma1(graph, &config.clocks);

    let status = loop {
        let k = steps.len();
        while let Some(&(p, _)) = pending.next_if(|&&(_, at)| at <= k) {
            config.crashed.insert(p);
            crashed_ids = config.crashed.iter().copied().collect();
        }
        match spec.stop {
            StopCondition::Gamma1Reached if in_gamma1 => break RunStatus::Gamma1Reached,
            StopCondition::Gamma1StableFor(w) => {
                stable = if in_gamma1 { stable + 1 } else { 0 };
                if stable > w {
                    break RunStatus::Gamma1Stable;
                }
            }
            _ => {}
        }
        let enabled = enabled_set(protocol, graph, &config);
        if enabled.is_empty() {
            break RunStatus::Terminal;
        }
        if k >= spec.max_steps {
            break RunStatus::MaxSteps;
        }
        let Some(selected) = selector.select(spec.daemon, graph, &config, &enabled, &history, k)? else {
            break RunStatus::ScriptExhausted;
        };
        let (next, fired) = apply(protocol, graph, &config.clocks, |p| config.is_crashed(p), &selected)?;
        history.record(k, &selected);
        in_gamma1 = is_gamma1(graph, &next);
        steps.push(Step {
            gamma1: in_gamma1,
            clocks_after: next.clone(),
            crashed: crashed_ids.clone(),
            selected,
            fired,
            shift: 0,
        });
        config.clocks = next;
    };

    Ok(Trace {
        topology: spec.topology.clone(),
        daemon: spec.daemon,
        initial: spec.initial.clone(),
        crash_plan: spec.crash_plan.clone(),
        policy: spec
            .policy_descriptor
            .clone()
            .unwrap_or_else(|| default_descriptor(&spec.policy)),
        seed: spec.seed.unwrap_or_else(|| spec.policy.seed()),
        status,
        lasso_start: None,
        steps,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcessorMetrics {
    pub increments: usize,
    pub decrements: usize,
    pub executions: usize,
    pub neutralizations: usize,
    /// Longest run of consecutive steps without an increment, counted from
    /// the point Γ1 holds for good. `None` for crashed processors or when Γ1
    /// is never reached.
    pub longest_quiet_after_gamma1: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunMetrics {
    pub steps: usize,
    /// First index from which every configuration of the trace is in Γ1.
    pub steps_to_gamma1: Option<usize>,
    pub per_processor: Vec<ProcessorMetrics>,
}

impl RunMetrics {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "steps={} steps_to_gamma1={}\n",
            self.steps,
            self.steps_to_gamma1.map_or("none".to_string(), |s| s.to_string())
        );
        for (p, m) in self.per_processor.iter().enumerate() {
            out.push_str(&format!(
                "p{p} increments={} decrements={} executions={} neutralizations={} longest_quiet={}\n",
                m.increments,
                m.decrements,
                m.executions,
                m.neutralizations,
                m.longest_quiet_after_gamma1
                    .map_or("none".to_string(), |q| q.to_string())
            ));
        }
        out
    }
}

pub fn metrics<P: Protocol + ?Sized>(protocol: &P, trace: &Trace) -> RunMetrics {
    let graph = trace.graph();
    let n = graph.len();
    let mut per = vec![ProcessorMetrics::default(); n];
    let fill_enabled = |out: &mut Vec<bool>, clocks: &[u64], crashed: &dyn Fn(usize) -> bool| {
        out.clear();
        out.extend((0..n).map(|p| !crashed(p) && protocol.decide(graph, clocks, p).is_enabled()));
    };

    let mut crashed = vec![false; n];
    for p in trace.crash_plan.crashed_by(0) {
        crashed[p] = true;
    }
    let mut before: &[u64] = &trace.initial;
    let (mut enabled_before, mut enabled_after) = (Vec::with_capacity(n), Vec::with_capacity(n));
    fill_enabled(&mut enabled_before, before, &|p| crashed[p]);
    let mut ran = vec![false; n];
    let mut in_gamma1 = Vec::with_capacity(trace.steps.len() + 1);
    in_gamma1.push(is_gamma1(graph, before));
    // incremented[k][p]: p's raw clock rose during step k.
    let mut incremented = vec![vec![false; n]; trace.steps.len()];
    let mut pending = trace.crash_plan.entries().iter().filter(|&&(_, at)| at > 0).peekable();

    for (k, s) in trace.steps.iter().enumerate() {
        let mut newly = Vec::new();
        while let Some(&(p, _)) = pending.next_if(|&&(_, at)| at <= k + 1) {
            newly.push(p);
        }
        fill_enabled(&mut enabled_after, &s.clocks_after, &|p| crashed[p] || newly.contains(&p));
        ran.iter_mut().for_each(|r| *r = false);
        for &p in &s.selected {
            ran[p] = true;
            let raw_after = s.clocks_after[p] + s.shift;
            per[p].executions += 1;
            if raw_after > before[p] {
                per[p].increments += 1;
                incremented[k][p] = true;
            } else if raw_after < before[p] {
                per[p].decrements += 1;
            }
        }
        for (p, m) in per.iter_mut().enumerate() {
            if !ran[p] && !crashed[p] && enabled_before[p] && (newly.contains(&p) || !enabled_after[p]) {
                m.neutralizations += 1;
            }
        }
        for p in newly {
            crashed[p] = true;
        }
        in_gamma1.push(is_gamma1(graph, &s.clocks_after));
        before = &s.clocks_after;
        std::mem::swap(&mut enabled_before, &mut enabled_after);
    }

    let steps_to_gamma1 = in_gamma1
        .iter()
        .rposition(|&g| !g)
        .map_or(Some(0), |last_bad| (last_bad + 1 < in_gamma1.len()).then_some(last_bad + 1));

    if let Some(start) = steps_to_gamma1 {
        for (p, m) in per.iter_mut().enumerate() {
            if crashed[p] {
                continue;
            }
            let (mut run, mut longest) = (0usize, 0usize);
            for row in &incremented[start..] {
                if row[p] {
                    run = 0;
                } else {
                    run += 1;
                    longest = longest.max(run);
                }
            }
            m.longest_quiet_after_gamma1 = Some(longest);
        }
    }

    RunMetrics {
        steps: trace.steps.len(),
        steps_to_gamma1,
        per_processor: per,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Uftss;
    use proptest::prelude::*;

    fn chain5() -> Topology {
        Topology::chain(5).unwrap()
    }

    #[test]
    fn step_examples() {
        let g = Graph::chain(5).unwrap();
        let c = Configuration::new(vec![1, 7, 6, 7, 13]);
        let (next, fired) = step(&Uftss, &g, &c, &[1, 4]).unwrap();
        assert_eq!(next.clocks, vec![1, 3, 6, 7, 6]);
        assert_eq!(fired, vec![(1, Rule::C1), (4, Rule::N)]);
        let (next, _) = step(&Uftss, &g, &next, &[0, 3]).unwrap();
        assert_eq!(next.clocks, vec![2, 3, 6, 5, 6]);

        let crashed = Configuration::with_crashed(vec![1, 7, 6, 7, 13], [1]);
        let (next, fired) = step(&Uftss, &g, &crashed, &[0, 3]).unwrap();
        assert_eq!(next.clocks, vec![6, 7, 6, 9, 13]);
        assert_eq!(fired, vec![(0, Rule::N), (3, Rule::C1)]);
        assert!(next.is_crashed(1));

        assert!(matches!(
            step(&Uftss, &g, &crashed, &[1]),
            Err(EngineError::IllegalStep { processor: 1, .. })
        ));
        let blocked = Configuration::new(vec![0, 1, 2, 3, 4]);
        assert!(step(&Uftss, &g, &blocked, &[2]).is_err());
        assert_eq!(step(&Uftss, &g, &blocked, &[]), Err(EngineError::EmptySelection));
    }

    #[test]
    fn scripted_run_matches_first_figure() {
        let script = vec![vec![1, 4], vec![0, 3], vec![2, 4], vec![0, 3], vec![1, 3]];
        let spec = RunSpec::new(chain5(), vec![1, 7, 6, 7, 13], Policy::Script(script)).max_steps(5);
        let trace = run(&Uftss, &spec).unwrap();
        assert_eq!(trace.len(), 5);
        assert_eq!(trace.final_clocks(), &[3, 4, 4, 4, 4]);
        assert_eq!(trace.status, RunStatus::MaxSteps);
        let first_gamma1 = trace.steps.iter().position(|s| s.gamma1);
        assert_eq!(first_gamma1, Some(2)); // γ3
        trace.replay(&Uftss).unwrap();

        let m = metrics(&Uftss, &trace);
        assert_eq!(m.per_processor[0].increments, 2);
        assert_eq!(m.steps_to_gamma1, Some(3));
    }

    #[test]
    fn frozen_chain_is_terminal_immediately() {
        let spec = RunSpec::new(chain5(), vec![0, 1, 2, 3, 4], Policy::Lru)
            .crashes(CrashPlan::initial([0, 4]))
            .max_steps(100);
        let trace = run(&Uftss, &spec).unwrap();
        assert_eq!(trace.status, RunStatus::Terminal);
        assert!(trace.is_empty());
        let m = metrics(&Uftss, &trace);
        assert!(m.per_processor.iter().all(|p| p.increments == 0 && p.executions == 0));
    }

    #[test]
    fn empty_trace_metrics() {
        let spec = RunSpec::new(chain5(), vec![1, 7, 6, 7, 13], Policy::Lru).max_steps(0);
        let trace = run(&Uftss, &spec).unwrap();
        let m = metrics(&Uftss, &trace);
        assert_eq!(m.steps, 0);
        assert_eq!(m.steps_to_gamma1, None);
        assert!(m.per_processor.iter().all(|p| *p == ProcessorMetrics::default()));
    }

    #[test]
    fn random_runs_are_reproducible() {
        let ring = Topology::ring(5).unwrap();
        let spec = RunSpec::new(ring, vec![3, 9, 0, 4, 12], Policy::Random(11)).max_steps(300);
        let a = run(&Uftss, &spec).unwrap();
        let b = run(&Uftss, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, 11);
        a.replay(&Uftss).unwrap();
    }

    #[test]
    fn crashes_take_effect_at_their_step() {
        let spec = RunSpec::new(chain5(), vec![4, 4, 4, 4, 4], Policy::Lru)
            .crashes(CrashPlan::new([(2, 3)]).unwrap())
            .max_steps(40);
        let trace = run(&Uftss, &spec).unwrap();
        for (k, s) in trace.steps.iter().enumerate() {
            assert_eq!(s.crashed.contains(&2), k >= 3);
            if k >= 3 {
                assert!(!s.selected.contains(&2));
                assert_eq!(s.clocks_after[2], trace.steps[2].clocks_after[2]);
            }
        }
        trace.replay(&Uftss).unwrap();
    }

    #[test]
    fn stop_conditions() {
        let spec = RunSpec::new(chain5(), vec![1, 7, 6, 7, 13], Policy::Lru)
            .max_steps(1000)
            .stop(StopCondition::Gamma1Reached);
        let t = run(&Uftss, &spec).unwrap();
        assert_eq!(t.status, RunStatus::Gamma1Reached);
        assert!(t.steps.last().unwrap().gamma1);

        let spec = spec.stop(StopCondition::Gamma1StableFor(20));
        let t = run(&Uftss, &spec).unwrap();
        assert_eq!(t.status, RunStatus::Gamma1Stable);
        assert!(t.steps.iter().rev().take(20).all(|s| s.gamma1));

        assert_eq!("gamma1-stable:100".parse(), Ok(StopCondition::Gamma1StableFor(100)));
        assert!("gamma1-stable:x".parse::<StopCondition>().is_err());
    }

    #[test]
    fn replay_detects_tampering() {
        let spec = RunSpec::new(chain5(), vec![1, 7, 6, 7, 13], Policy::Lru).max_steps(10);
        let mut t = run(&Uftss, &spec).unwrap();
        t.steps[4].clocks_after[0] += 1;
        assert!(matches!(t.replay(&Uftss), Err(EngineError::ReplayMismatch { step: 4, .. })));
    }

    #[test]
    fn sequential_application_agrees_on_independent_sets() {
        let g = Graph::ring(6).unwrap();
        let c = Configuration::new(vec![1, 7, 2, 9, 7, 0]);
        let (joint, _) = step(&Uftss, &g, &c, &[0, 2, 4]).unwrap();
        let mut seq = c.clone();
        for p in [0, 2, 4] {
            seq = step(&Uftss, &g, &seq, &[p]).unwrap().0;
        }
        assert_eq!(joint, seq);
    }

    #[test]
    fn trace_text_example() {
        let spec = RunSpec::new(chain5(), vec![1, 7, 6, 7, 13], Policy::Script(vec![vec![0, 3]]))
            .crashes(CrashPlan::initial([1]))
            .describe_policy("script:exemple2.sel")
            .max_steps(1);
        let t = run(&Uftss, &spec).unwrap();
        let text = t.to_text();
        assert_eq!(
            text,
            "topology=chain:5 daemon=locally-central init=1,7,6,7,13 crashes=1@0 policy=script:exemple2.sel seed=0 status=max-steps\n\
             step=0 selected=0,3 rules=0:N,3:C1 clocks=6,7,6,9,13 crashed=1 gamma1=0\n"
        );
        assert_eq!(Trace::from_text(&text).unwrap(), t);
        assert!(Trace::from_text("topology=chain:5\n").is_err());
        assert!(Trace::from_text(&text.replace("step=0", "step=3")).is_err());
    }

    proptest! {
        #[test]
        fn run_traces_round_trip_and_replay(
            clocks in proptest::collection::vec(0u64..12, 6),
            seed in 0u64..500,
            crash in 0usize..6,
            at in 0usize..20,
            ring in proptest::bool::ANY,
        ) {
            let topo = if ring { Topology::ring(6).unwrap() } else { Topology::chain(6).unwrap() };
            let spec = RunSpec::new(topo, clocks, Policy::Random(seed))
                .crashes(CrashPlan::new([(crash, at)]).unwrap())
                .max_steps(60);
            let t = run(&Uftss, &spec).unwrap();
            let text = t.to_text();
            let back = Trace::from_text(&text).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(back.to_text(), text);
            prop_assert!(t.replay(&Uftss).is_ok());
            for (k, s) in t.steps.iter().enumerate() {
                prop_assert!(s.fired.iter().map(|f| f.0).eq(s.selected.iter().copied()));
                if k >= at {
                    prop_assert!(!s.selected.contains(&crash));
                }
            }
        }
    }
}
