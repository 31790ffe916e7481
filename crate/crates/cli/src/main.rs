use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdflow::harness::runner::write_atomic;
use bdflow::harness::sweep::parse_value;
use bdflow::harness::{self, ExperimentConfig, Level};
use bdflow::{Error, SchemeRegistry};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bdflow", version, about = "Particle gradient flows with birth-death dynamics")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trajectory.csv, summary.json and snapshots.
    Run(Common),
    /// Run a config over a grid of values of one parameter and several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted path of the swept parameter, e.g. dynamics.variant or n.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Seeds per value, counting up from the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Run the acceptance suite.
    Verify {
        #[arg(long, default_value = "fast")]
        level: Level,
        /// Run only these criteria.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<u32>>,
        /// Write the JSON verdict here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the teacher network of a relu student-teacher config as CSV.
    TeacherDump(Common),
}

/// Exit status for a failed acceptance run.
const ACCEPTANCE_FAILED: u8 = 1;

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("no output directory: pass --out or set output_dir"))
}

fn run(common: &Common) -> Result<u8, Error> {
    let cfg = load(common)?;
    let dir = out_dir(common, &cfg)?;
    let outcome = harness::run_to_dir(&cfg, Some(&dir))?;
    let s = &outcome.summary;
    log::info!(
        "{} steps of {} on {}: energy {:?} -> {:?}, wrote {}",
        s.steps_completed,
        s.variant,
        s.model,
        s.initial_energy,
        s.final_energy,
        dir.display()
    );
    Ok(outcome.failure.map_or(0, |e| e.exit_code()))
}

fn sweep(common: &Common, axis: &str, values: &[String], seeds: usize, jobs: Option<usize>) -> Result<u8, Error> {
    let cfg = load(common)?;
    let dir = out_dir(common, &cfg)?;
    let values: Vec<toml::Value> = values.iter().map(|v| parse_value(v)).collect();
    let report = harness::run_sweep(&cfg, axis, &values, seeds, jobs, Some(&dir))?;
    for cell in &report.cells {
        log::info!(
            "{axis} = {}: mean final energy {:?} (std {:?}){}",
            cell.value,
            cell.mean_final_energy,
            cell.std_final_energy,
            if cell.failed { ", some runs failed" } else { "" }
        );
    }
    Ok(0)
}

fn verify(level: Level, only: Option<&[u32]>, out: Option<&Path>, quiet: bool) -> Result<u8, Error> {
    let report = harness::verify(level, only, |v| {
        if !quiet {
            let mut stderr = std::io::stderr().lock();
            let _ = writeln!(stderr, "{}", v.line());
        }
    })?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_atomic(&dir.join("verify.json"), &json)?;
        }
        None => println!("{json}"),
    }
    Ok(if report.passed { 0 } else { ACCEPTANCE_FAILED })
}

fn teacher_dump(common: &Common) -> Result<u8, Error> {
    let cfg = load(common)?;
    let model = cfg.validate(&SchemeRegistry::with_builtins())?;
    let bm = model
        .batch()
        .ok_or_else(|| Error::config(format!("{} has no teacher network", model.kind())))?;
    let csv = bm.teacher_csv();
    match common.out.clone().or_else(|| cfg.output_dir.clone()) {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_atomic(&dir.join("teacher.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "error"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();

    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::error!("cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match &cli.command {
        Command::Run(common) => run(common),
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
        } => sweep(common, axis, values, *seeds, cli.jobs),
        Command::Verify { level, only, out } => verify(*level, only.as_deref(), out.as_deref(), cli.quiet),
        Command::TeacherDump(common) => teacher_dump(common),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
