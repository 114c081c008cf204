use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edgeforest::harness::output::read_policy_history;
use edgeforest::harness::{
    emit, load_scenario, regret_eval, replay, run, run_many, sweep_variants, HarnessError, Manifest, RoutingPolicy,
    RunOptions, Scenario,
};
use edgeforest::overlay::check_dump;

/// Exit code for invariant violations; other failures exit with 1.
const INVARIANT_EXIT: u8 = 2;

#[derive(Parser)]
#[command(name = "edgeforest", version, about = "Run and check edge overlay / routing-game experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the routing policy.
    #[arg(long, value_parser = ["algorithm1", "bandit", "opt", "multicast"])]
    policy: Option<String>,
    /// Records the network event trace.
    #[arg(long)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one scenario and writes its metrics.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Runs one scenario per value of a dotted key.
    Sweep {
        scenario: PathBuf,
        /// `key=v1,v2,...`, e.g. `game.alpha=0.5,0.9`.
        #[arg(long)]
        vary: String,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Validates an overlay dump.
    OverlayCheck { dump: PathBuf },
    /// Recomputes the regret series of a policy history.
    RegretEval {
        history: PathBuf,
        /// Scenario of the run; defaults to the manifest next to the history.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Re-runs a manifest and compares output digests.
    Replay { manifest: PathBuf },
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))
}

fn scenario(path: &Path, common: &Common) -> Result<Scenario, HarnessError> {
    let mut sc = load_scenario(&read(path)?)?;
    if let Some(s) = common.seed {
        sc.seed = s;
    }
    if let Some(p) = &common.policy {
        sc.policy = p.parse::<RoutingPolicy>()?;
    }
    sc.validate()?;
    Ok(sc)
}

fn execute(cmd: Command) -> Result<bool, HarnessError> {
    match cmd {
        Command::Run { scenario: path, common } => {
            let sc = scenario(&path, &common)?;
            let bundle = run(&sc, RunOptions { trace: common.trace })?;
            let m = emit(&sc, &bundle, &common.out)?;
            println!("{}", serde_json::to_string_pretty(&bundle.summary).expect("serializable"));
            println!("wrote {} files to {}", m.files.len() + 1, common.out.display());
            Ok(true)
        }
        Command::Sweep {
            scenario: path,
            vary,
            threads,
            common,
        } => {
            let base = scenario(&path, &common)?;
            let variants = sweep_variants(&base, &vary)?;
            let results = run_many(&variants, threads, RunOptions { trace: common.trace });
            let mut first_err = None;
            for (i, (sc, r)) in variants.iter().zip(results).enumerate() {
                let dir = common.out.join(format!("variant-{i}"));
                match r {
                    Ok(bundle) => {
                        emit(sc, &bundle, &dir)?;
                        println!("{}: ok ({})", dir.display(), sc.hash());
                    }
                    Err(e) => {
                        eprintln!("{}: {e}", dir.display());
                        first_err.get_or_insert(e);
                    }
                }
            }
            first_err.map_or(Ok(true), Err)
        }
        Command::OverlayCheck { dump } => {
            let report = check_dump(&read(&dump)?)?;
            for v in &report.violations {
                println!("violation: {v}");
            }
            println!("{} nodes, {} violations", report.nodes, report.violations.len());
            Ok(report.violations.is_empty())
        }
        Command::RegretEval { history, scenario } => {
            let rows = read_policy_history(&read(&history)?)?;
            let sc = match scenario {
                Some(p) => load_scenario(&read(&p)?)?,
                None => {
                    let dir = history.parent().unwrap_or(Path::new("."));
                    let m: Manifest = serde_json::from_str(&read(&dir.join("manifest.json"))?)
                        .map_err(|e| HarnessError::Parse(e.to_string()))?;
                    load_scenario(&m.scenario)?
                }
            };
            println!("episode,instantaneous,cumulative,average");
            for r in regret_eval(&sc, &rows)? {
                println!("{},{},{},{}", r.episode, r.instantaneous, r.cumulative, r.average);
            }
            Ok(true)
        }
        Command::Replay { manifest } => {
            let m: Manifest =
                serde_json::from_str(&read(&manifest)?).map_err(|e| HarnessError::Parse(e.to_string()))?;
            let trace = m.files.iter().any(|f| f.name == "trace.tsv");
            let diffs = replay(&m, trace)?;
            for d in &diffs {
                println!("differs: {d}");
            }
            if diffs.is_empty() {
                println!("all {} files reproduced", m.files.len());
            }
            Ok(diffs.is_empty())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(INVARIANT_EXIT),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invariant() {
                ExitCode::from(INVARIANT_EXIT)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
