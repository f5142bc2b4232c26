use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use cps::catalog::Catalog;
use cps::console::{report_lines, Console};
use cps::daemon::{bind, serve, Daemon, DaemonConfig};
use cps::engine::{brute_force_cost, count_interleavings, RunReport};
use cps::reproduce::{check_lines, reproduce, sweep, Figure, SweepMode, DEFAULT_SEED};

/// Exhaustive sweeps above this many interleavings need `--sample`.
const EXHAUSTIVE_LIMIT: u64 = 100_000;

#[derive(Parser)]
#[command(name = "cps", version, about = "Crypto probing system: smart-card interleaving tests and watchdog")]
struct Cli {
    /// Extra directory of *.profile files.
    #[arg(long, global = true)]
    profiles: Option<PathBuf>,
    /// Extra directory of *.program files.
    #[arg(long, global = true)]
    programs: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Interactive directives against one simulated card.
    Repl {
        #[arg(long)]
        profile: String,
        #[arg(long)]
        program: Option<String>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Run a directive script (*.cps) or a sequence file (*.seq).
    Run {
        script: PathBuf,
        #[arg(long)]
        profile: String,
        #[arg(long)]
        program: Option<String>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Write the sequence report as JSON lines here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve the line protocol over TCP.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print C(l+k, l) and the brute-force test count.
    Enumerate {
        #[arg(long)]
        l: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        bits: u32,
    },
    /// Interleave program B into program A and classify every run.
    Sweep {
        #[arg(long)]
        program_a: String,
        #[arg(long)]
        program_b: String,
        /// Draw this many uniform interleavings instead of all of them.
        #[arg(long, conflicts_with = "adjacent")]
        sample: Option<usize>,
        /// Only insert B as one contiguous block.
        #[arg(long)]
        adjacent: bool,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Write every run as JSON lines here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a scripted experiment and check its outcome.
    Reproduce {
        figure: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

/// A failed expectation, as opposed to a usage or I/O error.
#[derive(Debug)]
struct AssertionFailed(String);

impl std::fmt::Display for AssertionFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AssertionFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<AssertionFailed>() => {
            eprintln!("cps: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("cps: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn catalog(cli: &Cli) -> Result<Arc<Catalog>> {
    let mut c = Catalog::builtin();
    if let Some(dir) = &cli.profiles {
        c.load_profiles_dir(dir)?;
    }
    if let Some(dir) = &cli.programs {
        c.load_programs_dir(dir)?;
    }
    Ok(Arc::new(c))
}

fn console(catalog: Arc<Catalog>, profile: &str, program: Option<&str>, seed: u64) -> Result<Console> {
    let p = catalog.profile(profile).ok_or_else(|| anyhow!("unknown profile {profile:?}"))?;
    let prog = match program {
        Some(id) => Some(catalog.program(id).ok_or_else(|| anyhow!("unknown program {id:?}"))?),
        None => None,
    };
    Ok(Console::new(catalog, p, prog, seed))
}

fn run(cli: Cli) -> Result<()> {
    let catalog = catalog(&cli)?;
    match cli.command {
        Command::Repl { profile, program, seed } => repl(console(catalog, &profile, program.as_deref(), seed)?),
        Command::Run { script, profile, program, seed, report } => {
            let mut c = console(catalog, &profile, program.as_deref(), seed)?;
            if script.extension().is_some_and(|e| e == "seq") {
                let r = c.run_sequence_file(&script)?;
                for line in report_lines(&r) {
                    println!("{line}");
                }
                write_reports(report.as_deref(), std::slice::from_ref(&r))
            } else {
                match c.run_script(&script) {
                    Ok(lines) => {
                        for line in lines {
                            println!("{line}");
                        }
                        Ok(())
                    }
                    Err(e) if e.is_assertion() => Err(AssertionFailed(e.to_string()).into()),
                    Err(e) => Err(e.into()),
                }
            }
        }
        Command::Serve { config } => {
            let config = DaemonConfig::load(&config)?;
            let daemon = Arc::new(Daemon::from_config(&config)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = bind(&config).await?;
                eprintln!("cps: listening on {}", listener.local_addr()?);
                serve(listener, daemon, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await;
                Ok(())
            })
        }
        Command::Enumerate { l, k, bits } => {
            println!("interleavings: {}", count_interleavings(l, k));
            println!("brute_force_cost: {}", brute_force_cost(l, k, bits));
            Ok(())
        }
        Command::Sweep { program_a, program_b, sample, adjacent, seed, workers, out } => {
            let mode = match (sample, adjacent) {
                (Some(n), _) => SweepMode::Sample(n),
                (None, true) => SweepMode::Adjacent,
                (None, false) => SweepMode::Exhaustive,
            };
            if mode == SweepMode::Exhaustive {
                let a = catalog.program(&program_a).ok_or_else(|| anyhow!("unknown program {program_a:?}"))?;
                let b = catalog.program(&program_b).ok_or_else(|| anyhow!("unknown program {program_b:?}"))?;
                let n = count_interleavings(a.len(), b.len());
                if n > EXHAUSTIVE_LIMIT.into() {
                    return Err(anyhow!("{n} interleavings; pass --sample N"));
                }
            }
            let (summary, reports) = sweep(&catalog, &program_a, &program_b, mode, seed, workers)?;
            print!("{summary}");
            write_reports(out.as_deref(), &reports)
        }
        Command::Reproduce { figure, out, seed } => {
            let figure: Figure = figure.parse()?;
            let outcome = reproduce(figure, &out, seed)?;
            for line in check_lines(&outcome) {
                println!("{line}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.passed() {
                Ok(())
            } else {
                Err(AssertionFailed(format!("{figure} drifted from the expected outcome")).into())
            }
        }
    }
}

fn write_reports(path: Option<&Path>, reports: &[RunReport]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let text: String = reports.iter().map(RunReport::to_json_lines).collect();
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn repl(mut console: Console) -> Result<()> {
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    let base = std::env::current_dir()?;
    loop {
        write!(out, "cps> ")?;
        out.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            writeln!(out)?;
            return Ok(());
        }
        if matches!(line.trim(), "quit" | "exit") {
            return Ok(());
        }
        match console.execute_line(&line, &base) {
            Ok(lines) => {
                for l in lines {
                    writeln!(out, "{l}")?;
                }
            }
            Err(e) => writeln!(out, "error: {e}")?,
        }
    }
}
