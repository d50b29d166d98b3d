//! Scenario runner: replays a seeded frame stream against every policy a
//! scenario names, writes the report, and exits nonzero if any comparison
//! verdict failed.

use clap::{Parser, ValueEnum};
use dscache::harness::{
    emit_csv, emit_jsonl, run_scenario, Precision, ReportFormat, Scenario, ScenarioOutcome,
};
use dscache::{Result, Scalar};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dscache",
    version,
    about = "Replays a scenario's frame stream against its cache policies and \
             reports per-query metrics and comparison verdicts."
)]
struct Args {
    /// Scenario description (JSON).
    #[arg(long, value_name = "FILE")]
    scenario: PathBuf,

    /// Directory for report files (report.jsonl, plus summary.csv with
    /// --format csv). Without it, records stream to stdout.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Report serialization.
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,

    /// Run only these policy ids (comma separated). Comparisons that need a
    /// dropped policy are skipped.
    #[arg(long, value_delimiter = ',', value_name = "ID,...")]
    policy: Vec<String>,

    /// Override the scenario's stream seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the scenario's numeric precision.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,

    /// Print comparison verdicts only; write no report.
    #[arg(long)]
    check: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Jsonl,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(args: &Args) -> Result<bool> {
    let mut scenario = Scenario::from_file(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(precision) = args.precision {
        scenario.precision = match precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if !args.policy.is_empty() {
        filter_policies(&mut scenario, &args.policy)?;
    }
    match scenario.precision {
        Precision::F32 => execute::<f32>(&scenario, args),
        Precision::F64 => execute::<f64>(&scenario, args),
    }
}

/// Restricts the scenario to the named policies, dropping comparisons that
/// can no longer run.
fn filter_policies(scenario: &mut Scenario, keep: &[String]) -> Result<()> {
    for id in keep {
        if !scenario.policies.iter().any(|p| &p.id == id) {
            return Err(dscache::Error::config(format!(
                "--policy names unknown policy '{id}'"
            )));
        }
    }
    scenario.policies.retain(|p| keep.contains(&p.id));
    let kept: Vec<String> = scenario.policies.iter().map(|p| p.id.clone()).collect();
    let before = scenario.comparisons.len();
    scenario
        .comparisons
        .retain(|c| c.involved_ids().iter().all(|id| kept.iter().any(|k| k == id)));
    let dropped = before - scenario.comparisons.len();
    if dropped > 0 {
        eprintln!("note: skipped {dropped} comparison(s) that need excluded policies");
    }
    Ok(())
}

fn execute<S: Scalar>(scenario: &Scenario, args: &Args) -> Result<bool> {
    let outcome = run_scenario::<S>(scenario)?;
    if args.check {
        print_verdicts(&outcome);
        return Ok(outcome.all_passed());
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.jsonl"), emit_jsonl(&outcome.records))?;
        if args.format == FormatArg::Csv {
            std::fs::write(dir.join("summary.csv"), emit_csv(&outcome.records))?;
        }
        print_verdicts(&outcome);
    } else {
        let format = match args.format {
            FormatArg::Jsonl => ReportFormat::Jsonl,
            FormatArg::Csv => ReportFormat::Csv,
        };
        emit_stdout(&dscache::harness::emit_report(&outcome.records, format));
    }
    Ok(outcome.all_passed())
}

/// Writes to stdout, treating a closed pipe (`dscache ... | head`) as a
/// normal early exit instead of a panic.
fn emit_stdout(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if out.write_all(text.as_bytes()).is_err() || out.flush().is_err() {
        std::process::exit(0);
    }
}

fn print_verdicts<S>(outcome: &ScenarioOutcome<S>) {
    use std::fmt::Write;
    let mut lines = String::new();
    for v in &outcome.verdicts {
        let _ = writeln!(
            lines,
            "{} {} — {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.comparison,
            v.detail
        );
    }
    let passed = outcome.verdicts.iter().filter(|v| v.passed).count();
    let _ = writeln!(lines, "{passed}/{} comparisons passed", outcome.verdicts.len());
    emit_stdout(&lines);
}
