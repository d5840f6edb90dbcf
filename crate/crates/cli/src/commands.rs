use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use unison_core::checker::{run_check, CheckKind};
use unison_core::engine::{metrics, run, EngineError, RunSpec, RunStatus, Trace};
use unison_core::scenarios::{replay, Scenario, ScenarioError};
use unison_core::scheduler::{parse_script, Policy, ScheduleError};
use unison_core::{Topology, Uftss};

use crate::args::{topology, CheckArgs, PlotArgs, PolicySpec, RunArgs, RunConfig, ScenarioArgs};
use crate::CliError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_STALLED: u8 = 2;

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn policy(spec: &PolicySpec) -> Result<Policy, CliError> {
    Ok(match spec {
        PolicySpec::Lru => Policy::Lru,
        PolicySpec::RoundRobin => Policy::RoundRobin,
        PolicySpec::Random(seed) => Policy::Random(*seed),
        PolicySpec::Script(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| CliError::NoInput(format!("{}: {e}", path.display())))?;
            Policy::Script(parse_script(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?)
        }
    })
}

fn engine_error(e: EngineError) -> CliError {
    match e {
        EngineError::Schedule(ScheduleError::ScriptViolation { step, reason }) => {
            CliError::Data(format!("illegal script at step {step}: {reason}"))
        }
        other => CliError::Usage(other.to_string()),
    }
}

/// A terminal run with a correct processor left means liveness stalled.
fn stalled(trace: &Trace) -> bool {
    trace.status == RunStatus::Terminal && trace.crash_plan.crashed_by(trace.len()).len() < trace.graph().len()
}

fn execute(config: &RunConfig, topo: &Topology, seed: Option<u64>) -> Result<Trace, CliError> {
    let (init, policy_spec) = match seed {
        Some(s) => (config.init.with_seed(s), config.policy.with_seed(s)),
        None => (config.init.clone(), config.policy.clone()),
    };
    let mut spec = RunSpec::new(topo.clone(), init.clocks(topo.len()), policy(&policy_spec)?)
        .crashes(config.crashes.clone())
        .daemon(config.daemon)
        .max_steps(config.max_steps)
        .stop(config.stop)
        .describe_policy(policy_spec.to_string());
    if let Some(s) = seed {
        spec = spec.seed(s);
    }
    run(&Uftss, &spec).map_err(engine_error)
}

pub fn cmd_run(args: &RunArgs) -> Result<u8, CliError> {
    let config = RunConfig::from_args(args)?;
    let topo = topology(&config.topology)?;

    let Some(range) = args.seeds else {
        let trace = execute(&config, &topo, None)?;
        let summary = metrics(&Uftss, &trace).summary();
        match &config.out {
            Some(path) => {
                write_file(path, &trace.to_text())?;
                print!("status={}\n{summary}", trace.status);
            }
            None => {
                print!("{}", trace.to_text());
                eprint!("status={}\n{summary}", trace.status);
            }
        }
        return Ok(if stalled(&trace) { EXIT_STALLED } else { EXIT_OK });
    };

    let dir = config
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--seeds needs --out <directory>".into()))?;
    let results: Vec<(u64, Result<Trace, CliError>)> = (range.start..range.end)
        .into_par_iter()
        .map(|seed| (seed, execute(&config, &topo, Some(seed))))
        .collect();
    let mut code = EXIT_OK;
    for (seed, result) in results {
        let trace = result?;
        let path = dir.join(format!("seed-{seed}.trace"));
        write_file(&path, &trace.to_text())?;
        let m = metrics(&Uftss, &trace);
        println!(
            "seed={seed} status={} steps={} steps_to_gamma1={} out={}",
            trace.status,
            trace.len(),
            m.steps_to_gamma1.map_or("none".into(), |s| s.to_string()),
            path.display()
        );
        if stalled(&trace) {
            code = EXIT_STALLED;
        }
    }
    Ok(code)
}

pub fn cmd_check(args: &CheckArgs) -> Result<u8, CliError> {
    let topo = topology(&args.topology)?;
    let crashed: BTreeSet<usize> = args.crashes.iter().copied().collect();
    let kinds: Vec<CheckKind> = args
        .checks
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| CliError::Usage(format!("--checks: {e}"))))
        .collect::<Result<_, _>>()?;
    if kinds.is_empty() {
        return Err(CliError::Usage("--checks lists nothing".into()));
    }

    let mut report = String::new();
    let mut found = 0usize;
    for kind in kinds {
        let r = run_check(&Uftss, kind, &topo, &crashed, args.span).map_err(|e| CliError::Usage(e.to_string()))?;
        println!("{}", r.summary());
        writeln!(report, "{}", r.summary()).unwrap();
        for (i, v) in r.violations.iter().enumerate() {
            found += 1;
            if let Err(e) = v.verify(&Uftss) {
                return Err(CliError::Internal(format!("witness for {v} does not replay: {e}")));
            }
            let mut line = format!("violation check={kind} {v}");
            if let (Some(dir), true) = (&args.out, i < args.max_witnesses) {
                let file = dir.join(format!("witness-{}-{i}.trace", kind.to_string().replace(':', "-")));
                write_file(&file, &v.witness.to_text())?;
                write!(line, " witness={}", file.display()).unwrap();
            }
            if i < args.max_witnesses {
                println!("{line}");
            }
            writeln!(report, "{line}").unwrap();
        }
    }
    if let Some(dir) = &args.out {
        write_file(&dir.join("report.txt"), &report)?;
    }
    let ok = if args.expect_witness { found > 0 } else { found == 0 };
    Ok(if ok { EXIT_OK } else { EXIT_FAILED })
}

pub fn cmd_scenario(args: &ScenarioArgs) -> Result<u8, CliError> {
    let scenario = match &args.dir {
        Some(root) => Scenario::load_dir(&root.join(&args.name)),
        None => Scenario::builtin(&args.name),
    }
    .map_err(|e| match e {
        ScenarioError::Unknown(_) | ScenarioError::Io { .. } => CliError::NoInput(e.to_string()),
        ScenarioError::Fixture { .. } => CliError::Data(e.to_string()),
    })?;
    let report = replay(&Uftss, &scenario);
    println!("{report}");
    Ok(if report.passed() { EXIT_OK } else { EXIT_FAILED })
}

/// `step,processor,clock,crashed,rule`, one row per processor per step.
/// Clocks are raw: recorded shifts are added back.
pub fn plot_csv(trace: &Trace) -> String {
    let mut out = String::from("step,processor,clock,crashed,rule\n");
    let mut shift = 0;
    for (k, s) in trace.steps.iter().enumerate() {
        shift += s.shift;
        for (p, clock) in s.clocks_after.iter().enumerate() {
            let crashed = u8::from(s.crashed.contains(&p));
            let rule = s.fired.iter().find(|(q, _)| *q == p).map(|(_, r)| r.to_string()).unwrap_or_default();
            writeln!(out, "{k},{p},{},{crashed},{rule}", clock + shift).unwrap();
        }
    }
    out
}

pub fn cmd_plotdata(args: &PlotArgs) -> Result<u8, CliError> {
    let path: &PathBuf = &args.trace;
    let text = fs::read_to_string(path).map_err(|e| CliError::NoInput(format!("{}: {e}", path.display())))?;
    let trace = Trace::from_text(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let csv = plot_csv(&trace);
    match &args.out {
        Some(out) => write_file(out, &csv)?,
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}
