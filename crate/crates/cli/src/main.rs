//! rbso-lab: runs the deterministic checks, the Monte Carlo experiments and
//! the acceptance suite, and writes CSV tables plus a JSON manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rbso::experiments::suite::{self, Check, SuiteOptions};
use rbso::experiments::{self, ExperimentConfig, MetricTable};

use rbso_cli::config::{load_config, LabError, EXIT_CHECKS_FAILED};
use rbso_cli::report::{self, CheckRow, RunInputs, RunManifest};

const EXIT_CODES: &str = "Exit codes:
  0  success, every check passed
  1  one or more checks failed
  2  usage error
  3  config file missing or unreadable
  4  config parse error (unknown key, wrong type)
  5  config invariant violated
  6  numerical failure while running
  7  output could not be written";

#[derive(Parser, Debug)]
#[command(name = "rbso-lab", version, about, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config with [model], [lattice] and [run] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to run.output, then ./rbso-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to run.threads, then RBSO_LAB_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// m, M, flow and propagator invariants on the reference lattice.
    DetCheck,
    /// Primitive loop ODE, closed forms, Ward identity and kernels.
    KLoops,
    /// Tree enumeration, M-graphs, tree sums and cores.
    TreeCheck,
    /// Entrywise and averaged local-law deviations.
    LocalLaw,
    /// Sampled |G|² and GG against the diffusion profile.
    Diffusion,
    /// Bulk eigenvector localization statistics over a coupling sweep.
    Deloc,
    /// Sampled G-loops against K-loops (length run.loop_length).
    LoopCompare,
    /// The full acceptance suite.
    Acceptance,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::DetCheck => "det-check",
            Command::KLoops => "k-loops",
            Command::TreeCheck => "tree-check",
            Command::LocalLaw => "local-law",
            Command::Diffusion => "diffusion",
            Command::Deloc => "deloc",
            Command::LoopCompare => "loop-compare",
            Command::Acceptance => "acceptance",
        }
    }

    fn needs_config(self) -> bool {
        matches!(self, Command::LocalLaw | Command::Diffusion | Command::Deloc | Command::LoopCompare)
    }
}

/// What a subcommand produced.
#[derive(Default)]
struct Outcome {
    tables: Vec<MetricTable>,
    checks: Vec<CheckRow>,
    /// Criteria that failed, including on time budget.
    failed: Vec<String>,
    timings: BTreeMap<String, f64>,
    summary: Vec<String>,
}

fn tag(group: &str, checks: Vec<Check>) -> Vec<CheckRow> {
    checks.into_iter().map(|check| CheckRow { group: group.into(), check }).collect()
}

fn resolve_threads(flag: Option<usize>, cfg: Option<&ExperimentConfig>) -> Result<Option<usize>, LabError> {
    if let Some(k) = flag.or_else(|| cfg.and_then(|c| c.run.threads)) {
        return Ok(Some(k));
    }
    match std::env::var("RBSO_LAB_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| LabError::Usage(format!("RBSO_LAB_THREADS = {v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run_checks(name: &str, f: fn() -> rbso::Result<Vec<Check>>) -> Result<Outcome, LabError> {
    let start = Instant::now();
    let checks = f()?;
    let mut o = Outcome::default();
    o.timings.insert(name.into(), start.elapsed().as_secs_f64());
    for c in &checks {
        o.summary.push(format!("{} {} = {:e} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.bound));
        if !c.pass {
            o.failed.push(c.name.clone());
        }
    }
    o.checks = tag(name, checks);
    Ok(o)
}

fn run_experiment(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome, LabError> {
    let start = Instant::now();
    let table = match cmd {
        Command::LocalLaw => experiments::run_local_law(cfg)?,
        Command::Diffusion => experiments::run_quantum_diffusion(cfg)?,
        Command::Deloc => experiments::run_delocalization(cfg)?,
        Command::LoopCompare => experiments::run_loop_comparison(cfg, cfg.run.loop_length)?,
        _ => unreachable!("not an experiment"),
    };
    let mut o = Outcome::default();
    o.timings.insert(cmd.name().into(), start.elapsed().as_secs_f64());
    o.summary.push(format!("{}: {} rows", table.name, table.rows.len()));
    o.tables.push(table);
    Ok(o)
}

fn run_suite(opts: &SuiteOptions) -> Outcome {
    let run = suite::run_acceptance(opts);
    let mut o = Outcome::default();
    for c in &run.criteria {
        o.summary.push(c.summary());
        for k in c.checks.iter().filter(|k| !k.pass) {
            o.summary.push(format!("    FAIL {} = {:e} ({})", k.name, k.value, k.bound));
        }
        if !c.pass() {
            o.failed.push(format!("criterion {}", c.id));
        }
        o.timings.insert(format!("criterion {}", c.id), c.seconds);
        o.checks.extend(tag(&c.id.to_string(), c.checks.clone()));
    }
    o.tables = run.tables;
    o
}

/// Tables with the same name are concatenated in order.
fn merge(tables: Vec<MetricTable>) -> Vec<MetricTable> {
    let mut out: Vec<MetricTable> = Vec::new();
    for t in tables {
        match out.iter_mut().find(|o| o.name == t.name) {
            Some(o) => o.extend(t),
            None => out.push(t),
        }
    }
    out
}

fn write_outputs(dir: &Path, o: &Outcome, inputs: RunInputs, threads: usize) -> Result<PathBuf, LabError> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::output(dir, e))?;
    let mut files = Vec::new();
    for t in merge(o.tables.clone()) {
        let p = dir.join(format!("{}.csv", t.name));
        report::write_table(&t, &p)?;
        files.push(report::file_entry(&p, t.rows.len())?);
    }
    if !o.checks.is_empty() {
        let p = dir.join("checks.csv");
        report::write_checks(&o.checks, &p)?;
        files.push(report::file_entry(&p, o.checks.len())?);
    }
    let manifest = RunManifest {
        tool: "rbso-lab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        input_hash: inputs.hash(),
        inputs,
        threads,
        files,
        timings: o.timings.clone(),
        pass: o.failed.is_empty(),
        failed: o.failed.clone(),
    };
    let p = dir.join("manifest.json");
    report::write_manifest(&manifest, &p)?;
    Ok(p)
}

fn run(cli: Cli) -> Result<bool, LabError> {
    let cmd = cli.command;
    let mut cfg = match &cli.config {
        Some(p) => Some(load_config(p)?),
        None if cmd.needs_config() => {
            return Err(LabError::Usage(format!("{} needs --config <path>", cmd.name())));
        }
        None => None,
    };
    if let (Some(c), Some(s)) = (cfg.as_mut(), cli.seed) {
        c.run.seed = s;
    }
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.run.seed)).unwrap_or(1);
    let threads = resolve_threads(cli.threads, cfg.as_ref())?;
    if threads == Some(0) {
        return Err(LabError::Usage("--threads must be at least 1".into()));
    }
    if let Some(k) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| LabError::Usage(format!("thread pool: {e}")))?;
    }
    let suite_opts = (cmd == Command::Acceptance).then(|| SuiteOptions { seed, ..SuiteOptions::default() });

    let outcome = match cmd {
        Command::DetCheck => run_checks(cmd.name(), suite::deterministic_checks)?,
        Command::KLoops => run_checks(cmd.name(), suite::loop_checks)?,
        Command::TreeCheck => run_checks(cmd.name(), suite::tree_checks)?,
        Command::Acceptance => run_suite(suite_opts.as_ref().expect("set for acceptance")),
        _ => run_experiment(cmd, cfg.as_ref().expect("checked above"))?,
    };
    for line in &outcome.summary {
        println!("{line}");
    }
    let dir = cli
        .out
        .or_else(|| cfg.as_ref().and_then(|c| c.run.output.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("rbso-out"));
    let inputs = RunInputs { subcommand: cmd.name().into(), seed, config: cfg, suite: suite_opts };
    let manifest = write_outputs(&dir, &outcome, inputs, rayon::current_num_threads())?;
    println!("manifest: {}", manifest.display());
    let pass = outcome.failed.is_empty();
    println!("{}", if pass { "ALL PASS" } else { "FAILED" });
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECKS_FAILED as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
