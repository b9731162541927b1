use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use datamarket_core::adversim::{run_scenario, Scenario, ScenarioError};
use datamarket_core::audit::{audit_log, AuditOutcome};
use datamarket_core::ledger::{parse_jsonl, to_jsonl, LedgerEvent};
use datamarket_core::tradegraph::{export_dot, rebuild_from_log};

const EXIT_RUN_FAILED: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_CORRUPT_LOG: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "datamarket", version, about = "Mediated data-market simulator")]
struct Cli {
    /// Print progress to standard error (repeat for more).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file; writes report.json and events.jsonl.
    Run {
        file: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Rebuild the trade graph from an event log; writes graph.dot and graph.json.
    Graph {
        events: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// List settled and refunded trades with their regulation predicate.
    Audit { events: PathBuf },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn read_log(path: &Path) -> Result<Vec<LedgerEvent>, Failure> {
    let text = read(path)?;
    parse_jsonl(&text).map_err(|e| fail(EXIT_CORRUPT_LOG, format!("{}: {e}", path.display())))
}

fn cmd_run(file: &Path, seed: Option<u64>, out: &Path, verbose: u8) -> Result<(), Failure> {
    let text = read(file)?;
    let mut scenario: Scenario = serde_json::from_str(&text)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", file.display())))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let report = run_scenario(&scenario).map_err(|e| match e {
        ScenarioError::MalformedScenario(_) => fail(EXIT_INPUT, e.to_string()),
        ScenarioError::Run(_) => fail(EXIT_RUN_FAILED, e.to_string()),
    })?;
    let mut json = report.to_json();
    json.push('\n');
    write(out, "report.json", &json)?;
    write(out, "events.jsonl", &to_jsonl(&report.events))?;
    if verbose > 0 {
        eprintln!(
            "{}: {:?} after {} events",
            report.scenario, report.phase, report.event_count
        );
        if verbose > 1 {
            for note in &report.notes {
                eprintln!("  {note}");
            }
        }
    }
    Ok(())
}

fn cmd_graph(events: &Path, out: &Path, verbose: u8) -> Result<(), Failure> {
    let log = read_log(events)?;
    let graph = rebuild_from_log(&log).map_err(|e| fail(EXIT_CORRUPT_LOG, e.to_string()))?;
    write(out, "graph.dot", &export_dot(&graph))?;
    let mut json = graph.to_json();
    json.push('\n');
    write(out, "graph.json", &json)?;
    if verbose > 0 {
        eprintln!(
            "{} vertices, {} edges",
            graph.vertices.len(),
            graph.edges.len()
        );
    }
    Ok(())
}

fn cmd_audit(events: &Path) -> Result<(), Failure> {
    let log = read_log(events)?;
    let rows = audit_log(&log).map_err(|e| fail(EXIT_CORRUPT_LOG, e.to_string()))?;
    for r in rows {
        let parties: Vec<String> = r
            .parties
            .iter()
            .map(|p| format!("{}={}", p.role, p.account.as_str()))
            .collect();
        let outcome = match r.outcome {
            AuditOutcome::Settled => "settled",
            AuditOutcome::Refunded => "refunded",
        };
        println!(
            "{}\trho={}\t{}\tprice={}\t{}{}\t{}",
            r.trade,
            r.rho_digest,
            parties.join(","),
            r.price,
            outcome,
            if r.flagged { "\tFLAGGED" } else { "" },
            r.rho_text
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { file, seed, out } => cmd_run(file, *seed, out, cli.verbose),
        Command::Graph { events, out } => cmd_graph(events, out, cli.verbose),
        Command::Audit { events } => cmd_audit(events),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
