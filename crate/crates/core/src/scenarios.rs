//! Golden replays. Each scenario is a directory holding a graph file, an
//! initial configuration literal, a selection script and the expected trace.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::configuration::{is_gamma1, Configuration};
use crate::engine::{classify_lasso, raw_delta, run, CrashPlan, RunSpec, RunStatus, Trace};
use crate::protocol::Protocol;
use crate::scheduler::{parse_script, Fairness, Policy};
use crate::topology::Graph;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error("scenario {name}: {file}: {msg}")]
    Fixture { name: String, file: &'static str, msg: String },
    #[error("scenario {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub initial: Configuration,
    pub script: Vec<Vec<usize>>,
    /// Carries the topology and crash plan in its header.
    pub expected: Trace,
}

const FILES: [&str; 4] = ["topology", "initial", "script", "expected"];

macro_rules! builtin {
    ($($name:literal),*) => {
        &[$(($name, [
            include_str!(concat!("../scenarios/", $name, "/topology")),
            include_str!(concat!("../scenarios/", $name, "/initial")),
            include_str!(concat!("../scenarios/", $name, "/script")),
            include_str!(concat!("../scenarios/", $name, "/expected")),
        ])),*]
    };
}

static BUILTIN: &[(&str, [&str; 4])] = builtin!(
    "exemple1",
    "exemple2",
    "exemple3",
    "exemple4",
    "impf2_freeze",
    "impSFMin_starvation"
);

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

impl Scenario {
    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        let (_, files) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ScenarioError::Unknown(name.to_string()))?;
        Self::from_texts(name, files)
    }

    /// Loads `<dir>/{topology,initial,script,expected}`; the scenario is
    /// named after the directory.
    pub fn load_dir(dir: &Path) -> Result<Self, ScenarioError> {
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        if !dir.is_dir() {
            return Err(ScenarioError::Unknown(name));
        }
        let mut texts = Vec::with_capacity(4);
        for file in FILES {
            texts.push(fs::read_to_string(dir.join(file)).map_err(|source| ScenarioError::Io {
                name: name.clone(),
                source,
            })?);
        }
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        Self::from_texts(&name, &[refs[0], refs[1], refs[2], refs[3]])
    }

    fn from_texts(name: &str, [topology, initial, script, expected]: &[&str; 4]) -> Result<Self, ScenarioError> {
        let fixture = |file: &'static str, msg: String| ScenarioError::Fixture {
            name: name.to_string(),
            file,
            msg,
        };
        let graph = Graph::parse_file_format(topology).map_err(|e| fixture("topology", e.to_string()))?;
        let literal: String = initial
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .collect::<Vec<_>>()
            .join(" ");
        let initial: Configuration = literal.parse().map_err(|e: crate::configuration::ConfigurationError| fixture("initial", e.to_string()))?;
        let script = parse_script(script).map_err(|e| fixture("script", e))?;
        let expected = Trace::from_text(expected).map_err(|e| fixture("expected", e.to_string()))?;

        if expected.graph() != &graph {
            return Err(fixture("expected", format!("header topology {} differs from the graph file", expected.topology)));
        }
        initial.validate(&graph).map_err(|e| fixture("initial", e.to_string()))?;
        if expected.initial != initial.clocks || expected.crash_plan.crashed_by(0) != initial.crashed {
            return Err(fixture("expected", "header disagrees with the initial configuration".into()));
        }
        Ok(Scenario {
            name: name.to_string(),
            initial,
            script,
            expected,
        })
    }

    fn crash_plan(&self) -> CrashPlan {
        self.expected.crash_plan.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioReport {
    pub name: String,
    pub steps_checked: usize,
    pub final_gamma1: bool,
    pub status: RunStatus,
    pub failures: Vec<String>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} steps, status {}, final {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.steps_checked,
            self.status,
            if self.final_gamma1 { "in Γ1" } else { "outside Γ1" }
        )?;
        for msg in &self.failures {
            write!(f, "\n  {msg}")?;
        }
        Ok(())
    }
}

/// Runs the script through the engine and compares every step with the
/// expected trace. A `terminal` header demands a terminal run; a
/// `lasso_start` header demands a strongly fair cycle that starves a
/// correct processor.
pub fn replay<P: Protocol + ?Sized>(protocol: &P, scenario: &Scenario) -> ScenarioReport {
    let expected = &scenario.expected;
    let spec = RunSpec::new(
        expected.topology.clone(),
        scenario.initial.clocks.clone(),
        Policy::Script(scenario.script.clone()),
    )
    .crashes(scenario.crash_plan())
    .daemon(expected.daemon)
    .max_steps(expected.len())
    .describe_policy(expected.policy.clone());

    let mut report = ScenarioReport {
        name: scenario.name.clone(),
        steps_checked: 0,
        final_gamma1: false,
        status: RunStatus::MaxSteps,
        failures: Vec::new(),
    };
    let mut actual = match run(protocol, &spec) {
        Ok(t) => t,
        Err(e) => {
            report.failures.push(e.to_string());
            return report;
        }
    };
    report.status = actual.status;
    report.final_gamma1 = is_gamma1(actual.graph(), actual.final_clocks());

    for (k, (a, e)) in actual.steps.iter().zip(&expected.steps).enumerate() {
        report.steps_checked += 1;
        if a.selected != e.selected {
            report.failures.push(format!("step {k}: selected {:?}, expected {:?}", a.selected, e.selected));
        }
        for (p, r) in &e.fired {
            match a.fired.iter().find(|(q, _)| q == p) {
                Some((_, got)) if got == r => {}
                Some((_, got)) => report.failures.push(format!("step {k}: p{p} fired {got}, expected {r}")),
                None => report.failures.push(format!("step {k}: p{p} did not fire, expected {r}")),
            }
        }
        for (p, (x, y)) in a.clocks_after.iter().zip(&e.clocks_after).enumerate() {
            if x != y {
                report.failures.push(format!("step {k}: p{p} clock {x}, expected {y}"));
            }
        }
        if a.crashed != e.crashed {
            report.failures.push(format!("step {k}: crashed {:?}, expected {:?}", a.crashed, e.crashed));
        }
        if a.gamma1 != e.gamma1 {
            report.failures.push(format!("step {k}: gamma1 {}, expected {}", a.gamma1, e.gamma1));
        }
    }
    if actual.len() != expected.len() {
        report.failures.push(format!(
            "run has {} steps, expected {} (status {})",
            actual.len(),
            expected.len(),
            actual.status
        ));
    }

    match (expected.status, expected.lasso_start) {
        (RunStatus::Terminal, _) if actual.status != RunStatus::Terminal => {
            report.failures.push(format!("run ended {}, expected terminal", actual.status));
        }
        (_, Some(start)) => {
            actual.lasso_start = Some(start);
            actual.status = RunStatus::Lasso;
            report.status = RunStatus::Lasso;
            check_lasso(protocol, &actual, start, &mut report.failures);
        }
        _ => {}
    }
    report
}

fn check_lasso<P: Protocol + ?Sized>(protocol: &P, trace: &Trace, start: usize, failures: &mut Vec<String>) {
    match classify_lasso(protocol, trace, start) {
        Ok(v) if v.admits(Fairness::Strong) => {}
        Ok(_) => failures.push("cycle is not strongly fair".into()),
        Err(e) => {
            failures.push(e.to_string());
            return;
        }
    }
    let crashed: BTreeSet<usize> = trace.crash_plan.crashed_by(trace.len());
    let starving = (0..trace.graph().len())
        .filter(|p| !crashed.contains(p))
        .any(|p| (start..trace.len()).all(|k| raw_delta(trace, k, p) <= 0));
    if !starving {
        failures.push("every correct processor increments in the cycle".into());
    }
}
