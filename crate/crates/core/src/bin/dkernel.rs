use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dkernel::dag::{self, VerifyReport};
use dkernel::scenario::{self, RunError, RunOptions, Scenario};
use dkernel::trace::{self, HeaderSummary};
use dkernel::{SimError, Trace};

const EXIT_VERIFY: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_LIMIT: u8 = 3;

#[derive(Parser)]
#[command(name = "dkernel", version, about = "Dynamic-kernel quantum network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trace, DAG, report and summary.
    Run(RunArgs),
    /// Check the commit-DAG invariants of a recorded trace.
    Verify {
        trace: PathBuf,
    },
    /// Render the commit DAG of a recorded trace as DOT.
    ExportDot {
        trace: PathBuf,
        #[arg(long)]
        collapse_transport: bool,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run seeds 0..N and report the aggregate pass rate.
    #[arg(long, value_name = "N")]
    batch: Option<u64>,
    /// Exit nonzero when verification fails.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    no_hints: bool,
    #[arg(long)]
    collapse_transport: bool,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long)]
    dot_out: Option<PathBuf>,
    /// Include planning, retry and signal records in the trace.
    #[arg(long)]
    verbose: bool,
    /// Directory for artifacts without an explicit path.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Chain length when the scenario is a chain template.
    #[arg(long)]
    chain_nodes: Option<usize>,
}

#[derive(Serialize)]
struct Summary {
    scenario: String,
    seed: u64,
    events: u64,
    end_time: f64,
    stamps: usize,
    delivered: usize,
    dropped: usize,
    latency: Option<f64>,
    final_fidelity: Option<f64>,
    verified: bool,
    headers: Vec<HeaderSummary>,
}

#[derive(Serialize)]
struct BatchEntry {
    seed: u64,
    delivered: usize,
    stamps: usize,
    end_time: Option<f64>,
    verified: bool,
    error: Option<String>,
}

#[derive(Serialize)]
struct BatchReport {
    scenario: String,
    runs: usize,
    passed: usize,
    pass_rate: f64,
    entries: Vec<BatchEntry>,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("dkernel: {msg}");
    ExitCode::from(code)
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn summarize(s: &Scenario, seed: u64, events: u64, end_time: f64, tr: &Trace, report: &VerifyReport) -> Summary {
    let sum = trace::summarize(tr);
    let first = sum.headers.first();
    Summary {
        scenario: s.name.clone(),
        seed,
        events,
        end_time,
        stamps: sum.headers.iter().map(|h| h.stamps).sum(),
        delivered: sum.delivered,
        dropped: sum.dropped,
        latency: first.and_then(|h| h.latency),
        final_fidelity: first.and_then(|h| h.final_fidelity),
        verified: report.all_pass(),
        headers: sum.headers,
    }
}

fn run(args: RunArgs) -> ExitCode {
    let s = match scenario::load_any(&args.scenario, args.chain_nodes) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_INPUT, format!("{}: {e}", args.scenario.display())),
    };
    if let Some(n) = args.batch {
        return batch(&s, &args, n);
    }
    let seed = args.seed.unwrap_or(s.seed);
    let opts = RunOptions {
        seed: Some(seed),
        verbose: args.verbose,
        no_hints: args.no_hints,
    };
    let (tr, events, end_time, limit) = match s.run(opts) {
        Ok(r) => (r.trace, r.events, r.end_time, None),
        Err(RunError::Sim(SimError::LimitExceeded { events, at, trace })) => {
            (*trace, events, at, Some(format!("event limit reached after {events} events at t={at}")))
        }
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let report = dag::verify(&tr);
    let summary = summarize(&s, seed, events, end_time, &tr, &report);
    let trace_out = args.trace_out.unwrap_or_else(|| args.out_dir.join("trace.jsonl"));
    let dot_out = args.dot_out.unwrap_or_else(|| args.out_dir.join("dag.dot"));
    let written = [
        (trace_out.as_path(), tr.to_jsonl()),
        (dot_out.as_path(), dag::export_dot(&tr, args.collapse_transport)),
        (&args.out_dir.join("report.json"), to_json(&report)),
        (&args.out_dir.join("summary.json"), to_json(&summary)),
    ]
    .iter()
    .try_for_each(|(p, text)| write(p, text));
    if let Err(e) = written {
        return fail(EXIT_INPUT, e);
    }
    print!("{}", to_json(&summary));
    if let Some(msg) = limit {
        return fail(EXIT_LIMIT, msg);
    }
    if args.strict && !report.all_pass() {
        return fail(EXIT_VERIFY, "verification failed");
    }
    ExitCode::SUCCESS
}

fn batch(s: &Scenario, args: &RunArgs, n: u64) -> ExitCode {
    let mut entries = Vec::new();
    let mut limited = false;
    for seed in 0..n {
        let opts = RunOptions {
            seed: Some(seed),
            verbose: args.verbose,
            no_hints: args.no_hints,
        };
        let entry = match s.run(opts) {
            Ok(r) => {
                let sum = trace::summarize(&r.trace);
                BatchEntry {
                    seed,
                    delivered: sum.delivered,
                    stamps: sum.headers.iter().map(|h| h.stamps).sum(),
                    end_time: Some(r.end_time),
                    verified: dag::verify(&r.trace).all_pass(),
                    error: None,
                }
            }
            Err(e) => {
                limited |= matches!(e, RunError::Sim(SimError::LimitExceeded { .. }));
                BatchEntry {
                    seed,
                    delivered: 0,
                    stamps: 0,
                    end_time: None,
                    verified: false,
                    error: Some(e.to_string()),
                }
            }
        };
        println!(
            "seed {:>4}  delivered {}  stamps {:>3}  verify {}",
            seed,
            entry.delivered,
            entry.stamps,
            if entry.verified { "pass" } else { "FAIL" }
        );
        entries.push(entry);
    }
    let passed = entries.iter().filter(|e| e.verified).count();
    let report = BatchReport {
        scenario: s.name.clone(),
        runs: entries.len(),
        passed,
        pass_rate: if entries.is_empty() { 0.0 } else { passed as f64 / entries.len() as f64 },
        entries,
    };
    println!("pass rate {}/{} ({:.1}%)", passed, report.runs, 100.0 * report.pass_rate);
    if let Err(e) = write(&args.out_dir.join("batch.json"), &to_json(&report)) {
        return fail(EXIT_INPUT, e);
    }
    if limited {
        return fail(EXIT_LIMIT, "at least one run hit the event limit");
    }
    if args.strict && passed < report.runs {
        return fail(EXIT_VERIFY, "verification failed");
    }
    ExitCode::SUCCESS
}

fn read_trace(path: &Path) -> Result<Trace, ExitCode> {
    Trace::read(path).map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Verify { trace } => {
            let tr = match read_trace(&trace) {
                Ok(t) => t,
                Err(code) => return code,
            };
            let report = dag::verify(&tr);
            print!("{}", to_json(&report));
            if report.all_pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY)
            }
        }
        Command::ExportDot {
            trace,
            collapse_transport,
            out,
        } => {
            let tr = match read_trace(&trace) {
                Ok(t) => t,
                Err(code) => return code,
            };
            let dot = dag::export_dot(&tr, collapse_transport);
            match out {
                Some(p) => match write(&p, &dot) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => fail(EXIT_INPUT, e),
                },
                None => {
                    print!("{dot}");
                    ExitCode::SUCCESS
                }
            }
        }
    }
}
