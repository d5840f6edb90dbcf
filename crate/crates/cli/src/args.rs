use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use unison_core::engine::{CrashPlan, StopCondition};
use unison_core::scheduler::Daemon;
use unison_core::topology::{Graph, Topology};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "unison-lab",
    version,
    about = "Simulate and model-check a crash-tolerant self-stabilizing unison protocol",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one execution, or a sweep over seeds, and write the trace
    Run(RunArgs),
    /// Run bounded exhaustive checks and lasso searches
    Check(CheckArgs),
    /// Replay a golden scenario
    Scenario(ScenarioArgs),
    /// Turn a trace into CSV clock series
    Plotdata(PlotArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// chain:<n>, ring:<n>, y:<r>, custom:<n>:<u>-<v>,... or file:<path>
    #[arg(long)]
    pub topology: String,
    /// Comma-separated clocks, or random:<seed>:<max>
    #[arg(long)]
    pub init: InitSpec,
    /// Crash processor p before step k (k = 0 means from the start)
    #[arg(long = "crash", value_name = "P@K")]
    pub crashes: Vec<String>,
    #[arg(long, default_value = "locally-central")]
    pub daemon: Daemon,
    /// lru, round-robin, random:<seed> or script:<path>
    #[arg(long, default_value = "lru")]
    pub policy: PolicySpec,
    #[arg(long, default_value_t = 1000)]
    pub max_steps: usize,
    /// max-steps, gamma1, gamma1-stable:<w> or terminal
    #[arg(long, default_value = "max-steps")]
    pub stop: StopCondition,
    /// Trace file, or the output directory of a sweep
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run every seed in a..b (half-open); seeds replace the ones in
    /// random: init and policy descriptors
    #[arg(long)]
    pub seeds: Option<SeedRange>,
    /// File of `key = value` lines read as flags before the command line
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub topology: String,
    /// Crashed processor (repeatable)
    #[arg(long = "crash", value_name = "P")]
    pub crashes: Vec<usize>,
    /// Maximum clock span of explored configurations
    #[arg(long, default_value_t = 4)]
    pub span: u64,
    /// Comma-separated: closure, blocking, priority, potential,
    /// starvation[:strong|:weak], convergence
    #[arg(long, default_value = "closure,blocking,priority,potential")]
    pub checks: String,
    /// Succeed only if some check finds a witness
    #[arg(long)]
    pub expect_witness: bool,
    /// Directory for report.txt and witness traces
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub max_witnesses: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    pub name: String,
    /// Load `<dir>/<name>` instead of the built-in fixtures
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    pub trace: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitSpec {
    Clocks(Vec<u64>),
    Random { seed: u64, max: u64 },
}

impl FromStr for InitSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix("random:") {
            let (seed, max) = rest.split_once(':').ok_or("expected random:<seed>:<max>")?;
            return Ok(InitSpec::Random {
                seed: seed.parse().map_err(|_| format!("bad seed `{seed}`"))?,
                max: max.parse().map_err(|_| format!("bad maximum `{max}`"))?,
            });
        }
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| format!("bad clock `{t}`")))
            .collect::<Result<_, _>>()
            .map(InitSpec::Clocks)
    }
}

impl fmt::Display for InitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitSpec::Clocks(c) => {
                let parts: Vec<String> = c.iter().map(u64::to_string).collect();
                f.write_str(&parts.join(","))
            }
            InitSpec::Random { seed, max } => write!(f, "random:{seed}:{max}"),
        }
    }
}

impl InitSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            InitSpec::Random { max, .. } => InitSpec::Random { seed, max: *max },
            other => other.clone(),
        }
    }

    pub fn clocks(&self, n: usize) -> Vec<u64> {
        match self {
            InitSpec::Clocks(c) => c.clone(),
            InitSpec::Random { seed, max } => unison_core::configuration::random_clocks(n, *seed, *max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    Lru,
    RoundRobin,
    Random(u64),
    Script(PathBuf),
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lru" => Ok(PolicySpec::Lru),
            "round-robin" => Ok(PolicySpec::RoundRobin),
            _ => {
                if let Some(seed) = s.strip_prefix("random:") {
                    seed.parse()
                        .map(PolicySpec::Random)
                        .map_err(|_| format!("bad seed `{seed}`"))
                } else if let Some(path) = s.strip_prefix("script:") {
                    Ok(PolicySpec::Script(PathBuf::from(path)))
                } else {
                    Err(format!("unknown policy `{s}`"))
                }
            }
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Lru => f.write_str("lru"),
            PolicySpec::RoundRobin => f.write_str("round-robin"),
            PolicySpec::Random(seed) => write!(f, "random:{seed}"),
            PolicySpec::Script(path) => write!(f, "script:{}", path.display()),
        }
    }
}

impl PolicySpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            PolicySpec::Random(_) => PolicySpec::Random(seed),
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once("..").ok_or("expected a..b")?;
        let start = a.parse().map_err(|_| format!("bad seed `{a}`"))?;
        let end = b.parse().map_err(|_| format!("bad seed `{b}`"))?;
        if start >= end {
            return Err(format!("empty seed range {s}"));
        }
        Ok(SeedRange { start, end })
    }
}

/// Resolves a topology descriptor, reading `file:<path>` graphs from disk.
pub fn topology(descriptor: &str) -> Result<Topology, CliError> {
    match descriptor.strip_prefix("file:") {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::NoInput(format!("{path}: {e}")))?;
            let graph = Graph::parse_file_format(&text).map_err(|e| CliError::Data(format!("{path}: {e}")))?;
            Ok(Topology::custom(graph))
        }
        None => descriptor.parse().map_err(|e| CliError::Usage(format!("--topology: {e}"))),
    }
}

/// Everything one `run` needs, after flag and config-file parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub topology: String,
    pub init: InitSpec,
    pub crashes: CrashPlan,
    pub daemon: Daemon,
    pub policy: PolicySpec,
    pub max_steps: usize,
    pub stop: StopCondition,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_args(args: &RunArgs) -> Result<Self, CliError> {
        let crashes = CrashPlan::from_str(&args.crashes.join(","))
            .map_err(|e| CliError::Usage(format!("--crash: {e}")))?;
        Ok(RunConfig {
            topology: args.topology.clone(),
            init: args.init.clone(),
            crashes,
            daemon: args.daemon,
            policy: args.policy.clone(),
            max_steps: args.max_steps,
            stop: args.stop,
            out: args.out.clone(),
        })
    }

    /// The same configuration as config-file lines.
    #[cfg(test)]
    pub fn to_config_file(&self) -> String {
        let mut out = format!("topology = {}\ninit = {}\n", self.topology, self.init);
        for (p, k) in self.crashes.entries() {
            out.push_str(&format!("crash = {p}@{k}\n"));
        }
        out.push_str(&format!(
            "daemon = {}\npolicy = {}\nmax-steps = {}\nstop = {}\n",
            self.daemon,
            self.policy,
            self.max_steps,
            stop_name(self.stop)
        ));
        if let Some(out_path) = &self.out {
            out.push_str(&format!("out = {}\n", out_path.display()));
        }
        out
    }
}

#[cfg(test)]
fn stop_name(stop: StopCondition) -> String {
    match stop {
        StopCondition::MaxSteps => "max-steps".into(),
        StopCondition::Gamma1Reached => "gamma1".into(),
        StopCondition::Gamma1StableFor(w) => format!("gamma1-stable:{w}"),
        StopCondition::Terminal => "terminal".into(),
    }
}

/// Splices the flags of a `--config <file>` into the argument list, right
/// after the subcommand, so explicit flags that follow take precedence.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        match arg.to_str() {
            Some("--config") => {
                let value = iter.next().ok_or_else(|| CliError::Usage("--config needs a file".into()))?;
                path = Some(PathBuf::from(value));
            }
            Some(s) if s.starts_with("--config=") => path = Some(PathBuf::from(&s["--config=".len()..])),
            _ => rest.push(arg),
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::NoInput(format!("{}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match value {
            "true" => flags.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                flags.push(OsString::from(format!("--{key}")));
                flags.push(OsString::from(value));
            }
        }
    }
    let at = rest.len().min(2);
    rest.splice(at..at, flags);
    Ok(rest)
}
