use clap::{Parser, Subcommand};
use dualgeo::scenario::{
    dump_json, list_examples, load_example, load_scenario, report_json, run, RunOutcome, Scenario,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "geo",
    version,
    about = "Run numerical certification checks for anchored geometry scenarios on dual bundles"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunOpts {
    /// Override the scenario's sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Override the scenario's tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Override the scenario's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the machine-readable report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write sampled values of every constructed connection here.
    #[arg(long = "dump-connection")]
    dump_connection: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the checks declared in a scenario file.
    Check {
        scenario: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Built-in example scenarios.
    Examples {
        #[command(subcommand)]
        cmd: ExamplesCmd,
    },
    /// Parse and validate a scenario file without running it.
    Validate { scenario: PathBuf },
}

#[derive(Subcommand)]
enum ExamplesCmd {
    /// List the built-in example names.
    List,
    /// Run one built-in example.
    Run {
        name: String,
        #[command(flatten)]
        opts: RunOpts,
    },
}

fn apply_overrides(scenario: &mut Scenario, opts: &RunOpts) {
    if let Some(s) = opts.samples {
        scenario.samples = s;
    }
    if let Some(t) = opts.tol {
        scenario.tol = t;
    }
    if let Some(s) = opts.seed {
        scenario.seed = s;
    }
}

fn execute(mut scenario: Scenario, opts: &RunOpts) -> ExitCode {
    apply_overrides(&mut scenario, opts);
    let outcome = run(&scenario);
    print_outcome(&scenario, &outcome);
    if let Some(path) = &opts.report {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let text = report_json(&scenario, &outcome, timestamp);
        if let Err(e) = std::fs::write(path, text) {
            eprintln!("error: cannot write report {}: {e}", path.display());
            return ExitCode::from(2);
        }
    }
    if let Some(path) = &opts.dump_connection {
        if let Err(e) = std::fs::write(path, dump_json(&outcome)) {
            eprintln!("error: cannot write dump {}: {e}", path.display());
            return ExitCode::from(2);
        }
    }
    if outcome.all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn print_outcome(scenario: &Scenario, outcome: &RunOutcome) {
    println!(
        "scenario {} (samples={}, seed={}, tol={:e})",
        scenario.origin, scenario.samples, scenario.seed, scenario.tol
    );
    for rep in &outcome.reports {
        println!(
            "{} {:<24} max_residual={:.3e} samples={}  {}",
            if rep.pass { "PASS" } else { "FAIL" },
            rep.name,
            rep.max_residual,
            rep.samples_used,
            rep.notes
        );
    }
    println!(
        "{}",
        if outcome.all_pass {
            "all checks passed"
        } else {
            "some checks FAILED"
        }
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Check { scenario, opts } => match load_scenario(&scenario.to_string_lossy()) {
            Ok(s) => execute(s, &opts),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Cmd::Validate { scenario } => match load_scenario(&scenario.to_string_lossy()) {
            Ok(s) => {
                println!(
                    "ok: {} checks, dims (m={}, p={}, r={})",
                    s.checks.len(),
                    s.spec.m,
                    s.spec.p_rank,
                    s.spec.r_rank
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Cmd::Examples { cmd } => match cmd {
            ExamplesCmd::List => {
                for name in list_examples() {
                    println!("{name}");
                }
                ExitCode::SUCCESS
            }
            ExamplesCmd::Run { name, opts } => match load_example(&name) {
                Ok(s) => execute(s, &opts),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            },
        },
    }
}
