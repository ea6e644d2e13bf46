use clap::{Parser, Subcommand};
use jumpbridge_cli::bundle::{export, Format};
use jumpbridge_cli::golden::{validate_golden, Golden, DEFAULT_SEED};
use jumpbridge_cli::scenario::{run, RunError, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit status for malformed command lines.
const USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "jumpbridge", version, about = "Schrodinger bridges over jump-diffusion references")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override every seed in the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Suppress progress output on standard error.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario described by a TOML file and write its bundle.
    Run { config: PathBuf },
    /// Run a built-in scenario and check it against known answers.
    Validate {
        #[arg(value_enum)]
        name: Golden,
    },
    /// Re-emit a bundle as CSV tables or a single JSON document.
    Export {
        bundle: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let say = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Run { config } => {
            let opts = RunOptions {
                seed: cli.seed,
                out_dir: cli.out_dir.clone(),
            };
            match run(config, &opts) {
                Ok((dir, out)) => {
                    let d = &out.solution.diagnostics;
                    say(format!(
                        "converged in {} iterations; system residual {:.3e}/{:.3e}; bundle written to {}",
                        out.solution.trace.iterations,
                        d.system_residual.0,
                        d.system_residual.1,
                        dir.display()
                    ));
                    for w in &d.kernel_warnings {
                        say(format!("warning: {w}"));
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => report(&e),
            }
        }
        Command::Validate { name } => {
            let seed = cli.seed.unwrap_or(DEFAULT_SEED);
            let dir = cli
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("validate_{}", name.name())));
            match validate_golden(*name, seed, Some(&dir)) {
                Ok(v) => {
                    for c in &v.criteria {
                        say(format!(
                            "criterion {}: {} ({})",
                            c.id,
                            if c.passed { "PASS" } else { "FAIL" },
                            c.name
                        ));
                    }
                    say(format!(
                        "{}: {}; verdict in {}",
                        v.scenario,
                        if v.passed { "all criteria pass" } else { "some criteria fail" },
                        dir.display()
                    ));
                    ExitCode::SUCCESS
                }
                Err(e) => report(&e),
            }
        }
        Command::Export { bundle, format } => match export(bundle, *format, cli.out_dir.as_deref()) {
            Ok(files) => {
                for f in files {
                    say(format!("wrote {}", f.display()));
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}

fn report(e: &RunError) -> ExitCode {
    eprintln!("error: {e}");
    if let RunError::Solve(jumpbridge::Error::Infeasible { side, cells }) = e {
        eprintln!("{side} marginal charges cells with no reference mass: {cells:?}");
    }
    if let RunError::Solve(jumpbridge::Error::NotConverged { .. }) = e {
        eprintln!("residual trace written to the output directory");
    }
    ExitCode::from(e.exit_code() as u8)
}
