use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::diagnostics::{observe, rate_fit, FitForm, FitResult, TrajectoryRecord, TRAJECTORY_HEADER};
use crate::dynamics::{run_step, SchemeRegistry};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::rng;

/// Version of the CSV/JSON output layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub form: FitForm,
    pub window: [f64; 2],
    /// `None` when the fit could not be computed.
    pub result: Option<FitResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub variant: String,
    pub model: String,
    pub n: usize,
    pub steps_requested: usize,
    pub steps_completed: u64,
    pub final_time: f64,
    pub initial_energy: Option<f64>,
    pub final_energy: Option<f64>,
    pub failed: bool,
    pub error: Option<String>,
    pub fits: Vec<FitSummary>,
    pub snapshots: Vec<String>,
    pub wall_time_s: f64,
    /// Normalized config; parsing it back reproduces the run exactly.
    pub config: String,
}

#[derive(Debug)]
pub struct Snapshot {
    pub time: f64,
    pub file: String,
    pub csv: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<TrajectoryRecord>,
    pub snapshots: Vec<Snapshot>,
    pub summary: RunSummary,
    pub ensemble: Ensemble,
    /// The error that stopped the run early, if any.
    pub failure: Option<Error>,
}

impl RunOutcome {
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TRAJECTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes `trajectory.csv`, `summary.json` and snapshots into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("trajectory.csv"), &self.trajectory_csv())?;
        for s in &self.snapshots {
            write_atomic(&dir.join(&s.file), &s.csv)?;
        }
        write_atomic(&dir.join("summary.json"), &self.summary_json()?)
    }
}

/// Writes through a temporary file in the same directory and renames it into
/// place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| format!(".{}.tmp", n.to_string_lossy()))
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    tmp.set_file_name(name);
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs one experiment in memory. Configuration problems are returned as
/// errors; failures during time stepping end the run early and are reported
/// in the outcome.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let registry = SchemeRegistry::with_builtins();
    let model = cfg.validate(&registry)?;
    let scheme = registry.get(&cfg.dynamics.variant)?;
    let step_time = scheme.step_duration(&cfg.dynamics);

    let mut ens = Ensemble::init(
        &cfg.init.position,
        cfg.init.amplitude.as_ref(),
        cfg.n,
        model.dimension(),
        cfg.seed,
    )?;
    let mut dyn_rng = rng::stream(cfg.seed, rng::STREAM_DYNAMICS);
    let mut eval_rng = rng::stream(cfg.seed, rng::STREAM_EVAL);

    let mut snapshot_times: Vec<f64> = cfg.snapshot_times.clone();
    snapshot_times.sort_by(f64::total_cmp);
    let mut next_snapshot = 0;
    let mut snapshots = Vec::new();
    let mut take_snapshots = |ens: &Ensemble, time: f64, snapshots: &mut Vec<Snapshot>| {
        while next_snapshot < snapshot_times.len() && snapshot_times[next_snapshot] <= time + 0.5 * step_time {
            snapshots.push(Snapshot {
                time,
                file: format!("snapshot_{next_snapshot:03}.csv"),
                csv: ens.to_csv(),
            });
            next_snapshot += 1;
        }
    };

    let mut records = Vec::new();
    let mut failure = None;
    let (mut births, mut deaths) = (0usize, 0usize);
    let record = |ens: &Ensemble, births: usize, deaths: usize, eval_rng: &mut _| -> Result<TrajectoryRecord> {
        let obs = observe(model.as_ref(), ens, eval_rng, cfg.eval_batch_size)?;
        Ok(TrajectoryRecord {
            step: ens.step_count,
            time: ens.step_count as f64 * step_time,
            energy: obs.energy,
            mean_v: obs.mean_v,
            var_v: obs.var_v,
            grad_norm_sq: obs.grad_norm_sq,
            births,
            deaths,
            n: ens.len(),
        })
    };

    match record(&ens, 0, 0, &mut eval_rng) {
        Ok(r) => records.push(r),
        Err(e) => failure = Some(e),
    }
    take_snapshots(&ens, 0.0, &mut snapshots);
    if failure.is_none() {
        for step in 1..=cfg.steps {
            match run_step(scheme, model.as_ref(), &mut ens, &cfg.dynamics, &mut dyn_rng) {
                Ok(rep) => {
                    births += rep.births;
                    deaths += rep.deaths;
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
            if step % cfg.record_every == 0 || step == cfg.steps {
                match record(&ens, births, deaths, &mut eval_rng) {
                    Ok(r) => records.push(r),
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
                births = 0;
                deaths = 0;
            }
            take_snapshots(&ens, step as f64 * step_time, &mut snapshots);
        }
    }

    let fits = cfg
        .fits
        .iter()
        .map(|req| match rate_fit(&records, (req.window[0], req.window[1]), req.form) {
            Ok(r) => FitSummary {
                form: req.form,
                window: req.window,
                result: Some(r),
                error: None,
            },
            Err(e) => FitSummary {
                form: req.form,
                window: req.window,
                result: None,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        variant: cfg.dynamics.variant.clone(),
        model: model.kind().to_string(),
        n: cfg.n,
        steps_requested: cfg.steps,
        steps_completed: ens.step_count,
        final_time: ens.step_count as f64 * step_time,
        initial_energy: records.first().map(|r| r.energy),
        final_energy: records.last().map(|r| r.energy),
        failed: failure.is_some(),
        error: failure.as_ref().map(|e| e.to_string()),
        fits,
        snapshots: snapshots.iter().map(|s| s.file.clone()).collect(),
        wall_time_s: started.elapsed().as_secs_f64(),
        config: cfg.to_toml_string()?,
    };
    if let Some(e) = &failure {
        log::error!("run stopped after {} steps: {e}", ens.step_count);
    }
    Ok(RunOutcome {
        records,
        snapshots,
        summary,
        ensemble: ens,
        failure,
    })
}

/// Runs and writes outputs into `dir` (default: the config's `output_dir`).
pub fn run_to_dir(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<RunOutcome> {
    let outcome = run_experiment(cfg)?;
    let dir = dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("no output directory given"))?;
    outcome.write_to(&dir)?;
    Ok(outcome)
}

