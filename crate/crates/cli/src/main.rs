use std::path::PathBuf;
use std::process::ExitCode;

use batchsim_cli::{cmd_calibrate, cmd_capacity, cmd_simulate, cmd_sweep, CliError, CommandOptions, SweepResult, EXIT_INFEASIBLE, EXIT_OK};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "sim", version, about = "Discrete-event simulator for LLM inference batching policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one workload and write per-request metrics and the event log.
    Simulate(Common),
    /// Find the highest load each scheduler sustains under the SLO.
    Capacity(Common),
    /// Vary one knob and tabulate the outcome.
    Sweep(Common),
    /// Fit cost-model parameters to an anchor-timing file.
    Calibrate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); for `calibrate`, an anchor file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the workload seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent simulations.
    #[arg(long)]
    jobs: Option<usize>,
}

fn run(cmd: Command) -> Result<u8, CliError> {
    let (Command::Simulate(c) | Command::Capacity(c) | Command::Sweep(c) | Command::Calibrate(c)) = &cmd;
    let opts = CommandOptions { out: c.out.clone(), seed: c.seed, jobs: c.jobs };
    match &cmd {
        Command::Simulate(_) => {
            let s = cmd_simulate(&c.config, &opts)?;
            let l = &s.latency;
            println!(
                "{} {}: tbt p99 {:.1} ms (slo {:.1}), ttft p50 {:.1} ms, bubbles {:.1}%, {:.1} tok/s",
                s.model, s.slo, l.tbt_p99, s.slo_ms, l.ttft_median, 100.0 * l.bubble_fraction, l.throughput
            );
            Ok(if s.meets_slo { EXIT_OK } else { EXIT_INFEASIBLE })
        }
        Command::Capacity(_) => {
            let rows = cmd_capacity(&c.config, &opts)?;
            for r in &rows {
                if r.infeasible {
                    println!("{:<14} {:<8} infeasible", r.scheduler.to_string(), r.slo);
                } else {
                    println!("{:<14} {:<8} {:.3} qps", r.scheduler.to_string(), r.slo, r.qps);
                }
            }
            Ok(if rows.iter().any(|r| r.infeasible) { EXIT_INFEASIBLE } else { EXIT_OK })
        }
        Command::Sweep(_) => {
            match cmd_sweep(&c.config, &opts)? {
                SweepResult::Runs(rows) => {
                    for r in &rows {
                        println!(
                            "{:?}={} qps {:.3} tbt p99 {:.1} ms ttft p50 {:.1} ms{}",
                            r.knob, r.value, r.qps, r.tbt_p99, r.ttft_median, if r.pass { "" } else { " (slo missed)" }
                        );
                    }
                }
                SweepResult::Chunks(rows) => {
                    for r in &rows {
                        println!("chunk {:>5}: {:.1} ms ({:+.1}%)", r.chunk, r.chunked_ms, 100.0 * r.overhead);
                    }
                }
            }
            Ok(EXIT_OK)
        }
        Command::Calibrate(_) => {
            let o = cmd_calibrate(&c.config, &opts)?;
            for r in &o.residuals {
                println!("{:<24} observed {:>9.2} ms  fitted {:>9.2} ms  ({:+.2}%)", r.label, r.observed_ms, r.fitted_ms, 100.0 * r.rel_error);
            }
            for n in &o.notes {
                println!("note: {n}");
            }
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
