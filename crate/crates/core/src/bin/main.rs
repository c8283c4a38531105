use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fused_moe::harness::{self, ExperimentConfig, HarnessError, RunMode, StragglerSpec};
use fused_moe::runtime::trace::write_jsonl;

#[derive(Parser)]
#[command(name = "fused-moe", version, about = "Distributed MoE layer on an emulated PGAS fabric")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Overlapped,
    Sequential,
    OracleCheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    Memory,
}

#[derive(Subcommand)]
enum Command {
    /// Run warmup and measured forward passes and report metrics.
    Run {
        /// TOML or JSON experiment config.
        #[arg(long, required_unless_present = "table")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "overlapped")]
        mode: Mode,
        /// constant:MS | uniform:LO:HI | lognormal:SIGMA[:MEDIAN_MS], optional @DEVICE
        #[arg(long)]
        straggler: Option<String>,
        /// Print a closed-form table instead of running.
        #[arg(long, value_enum)]
        table: Option<Table>,
        /// JSON-lines trace of the last measured pass.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// CSV of per-(src,dst) bytes, efficient and padded.
        #[arg(long)]
        bytes_csv: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode, HarnessError> {
    let Command::Run {
        config,
        mode,
        straggler,
        table,
        trace,
        report,
        bytes_csv,
        seed,
    } = Cli::parse().command;

    if let Some(Table::Memory) = table {
        let rows = harness::memory_table_rows();
        print!("{}", harness::memory_table_text(&rows));
        if let Some(path) = report {
            let json = serde_json::to_vec_pretty(&rows).expect("rows serialize");
            harness::write_file(&path, &json)?;
        }
        return Ok(ExitCode::SUCCESS);
    }

    let path = config.expect("clap enforces --config without --table");
    let mut exp = ExperimentConfig::load(&path)?;
    if let Some(s) = seed {
        exp.moe.seed = s;
    }
    let straggler: Option<StragglerSpec> = straggler.or_else(|| exp.straggler.clone()).map(|s| s.parse()).transpose()?;
    let mode = match mode {
        Mode::Overlapped => RunMode::Overlapped,
        Mode::Sequential => RunMode::Sequential,
        Mode::OracleCheck => RunMode::OracleCheck,
    };

    let outcome = harness::run(&exp, mode, straggler.as_ref())?;
    let r = &outcome.report;
    println!(
        "latency median {:.3} ms, mean {:.3} ms over {} passes",
        r.latency.median_ms,
        r.latency.mean_ms,
        r.latency.samples_ms.len()
    );
    println!(
        "bytes efficient {} padded {} ratio {:.4}",
        r.bytes.efficient_total, r.bytes.padded_total, r.bytes.ratio
    );
    let tasks: usize = r.tasks.iter().map(|d| d.scheduled).sum();
    println!("tasks {tasks}, busy {:.3}, audit {}", r.busy_fraction, if r.audit.passed() { "ok" } else { "FAILED" });
    if let Some(s) = &r.straggler {
        println!(
            "straggler {} on device {}: overlapped {:.3} ms, sequential {:.3} ms, ratio {:.3}",
            s.spec, s.device, s.overlapped_median_ms, s.sequential_median_ms, s.ratio
        );
    }
    if let Some(o) = &r.oracle {
        println!("max relative error {:.3e} (tolerance {:.0e})", o.max_relative_error, o.tolerance);
    }

    if let Some(p) = trace {
        let mut buf = Vec::new();
        write_jsonl(&outcome.trace, &mut buf).expect("write to vec");
        harness::write_file(&p, &buf)?;
    }
    if let Some(p) = report {
        harness::write_file(&p, &serde_json::to_vec_pretty(r).expect("report serializes"))?;
    }
    if let Some(p) = bytes_csv {
        harness::write_file(&p, r.bytes.to_csv().as_bytes())?;
    }
    Ok(if r.ok() && r.audit.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
