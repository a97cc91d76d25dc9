use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nicstack::scenario::{run_scenario, ScenarioConfig, ScenarioKind};
use nicstack::selftest;
use nicstack::sim::HardwareProfile;

#[derive(Parser)]
#[command(name = "nicstack", version, about = "SmartNIC network stack simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and write `<name>.jsonl` and `<name>_summary.csv`.
    Run {
        scenario: PathBuf,
        /// Overrides the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the file's `output` key, else `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Hardware profile file; the scenario's `[profile]` overrides still apply on top.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// List the scenario kinds.
    ListScenarios,
    /// Run the built-in randomized self-checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(
    scenario: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    profile: Option<PathBuf>,
) -> Result<(), String> {
    let text =
        std::fs::read_to_string(&scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
    let base = scenario.parent().unwrap_or(std::path::Path::new("."));
    let mut cfg =
        ScenarioConfig::parse(&text, base).map_err(|e| format!("{}: {e}", scenario.display()))?;
    if let Some(path) = profile {
        let ptext =
            std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut p =
            HardwareProfile::from_config(&ptext).map_err(|e| format!("{}: {e}", path.display()))?;
        // keep the scenario's own [profile] overrides
        let entries = nicstack::config::parse_entries(&text).map_err(|e| e.to_string())?;
        let over: Vec<_> = entries
            .into_iter()
            .filter(|e| e.section.as_deref() == Some("profile"))
            .collect();
        p.apply_entries(&over)
            .map_err(|e| format!("{}: {e}", scenario.display()))?;
        cfg.profile = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out
        .or(cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let output = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let (jsonl, csv) = output.write(&dir, &cfg.name).map_err(|e| e.to_string())?;
    print!("{}", output.csv());
    eprintln!("wrote {} and {}", jsonl.display(), csv.display());
    Ok(())
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run {
            scenario,
            seed,
            out,
            profile,
        } => match run(scenario, seed, out, profile) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Cmd::ListScenarios => {
            for k in ScenarioKind::ALL {
                println!("{:<22} {}", k.name(), k.describe());
            }
            ExitCode::SUCCESS
        }
        Cmd::Selftest { seed } => {
            let mut failed = 0;
            for c in selftest::run(seed) {
                match c.result {
                    Ok(()) => println!("ok   {}", c.name),
                    Err(e) => {
                        failed += 1;
                        println!("FAIL {}: {e}", c.name);
                    }
                }
            }
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
