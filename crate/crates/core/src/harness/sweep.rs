use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::runner::{run_experiment, write_atomic, SCHEMA_VERSION};

/// Sets the dotted `path` of a TOML document to `value`. Every intermediate
/// table must exist.
pub fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::config("empty sweep axis"))?;
    let mut cur = doc;
    for k in keys {
        cur = cur
            .get_mut(k)
            .ok_or_else(|| Error::config(format!("sweep axis {path:?}: no table {k:?}")))?;
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("sweep axis {path:?} does not point into a table")))?;
    if let Some(old) = table.get(last) {
        let numeric = |v: &toml::Value| v.is_integer() || v.is_float();
        let compatible = old.same_type(&value) || (numeric(old) && numeric(&value));
        if !compatible {
            return Err(Error::config(format!(
                "sweep axis {path:?} holds a {}, got a {}",
                old.type_str(),
                value.type_str()
            )));
        }
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Reads a sweep value from the command line: integer, float, boolean, or
/// else a string.
pub fn parse_value(s: &str) -> toml::Value {
    if let Ok(i) = s.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = s.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = s.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(s.to_string())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRun {
    pub seed: u64,
    pub final_energy: Option<f64>,
    pub failed: bool,
    pub error: Option<String>,
    pub output: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub value: toml::Value,
    pub runs: Vec<SweepRun>,
    pub mean_final_energy: Option<f64>,
    pub std_final_energy: Option<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub axis: String,
    pub seeds: usize,
    pub cells: Vec<SweepCell>,
}

fn run_cell(base: &toml::Value, axis: &str, value: &toml::Value, seed: u64, out: Option<&Path>) -> SweepRun {
    let attempt = || -> Result<(Option<f64>, Option<String>, Option<String>)> {
        let mut doc = base.clone();
        set_path(&mut doc, axis, value.clone())?;
        set_path(&mut doc, "seed", toml::Value::Integer(seed as i64))?;
        let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let outcome = run_experiment(&cfg)?;
        let written = match out {
            Some(dir) => {
                outcome.write_to(dir)?;
                Some(dir.display().to_string())
            }
            None => None,
        };
        Ok((
            outcome.summary.final_energy,
            outcome.failure.map(|e| e.to_string()),
            written,
        ))
    };
    match attempt() {
        Ok((energy, failure, output)) => SweepRun {
            seed,
            final_energy: energy,
            failed: failure.is_some(),
            error: failure,
            output,
        },
        Err(e) => SweepRun {
            seed,
            final_energy: None,
            failed: true,
            error: Some(e.to_string()),
            output: None,
        },
    }
}

/// Runs every `value × seed` cell of the sweep on a pool of `jobs` workers.
/// Seeds are `base.seed + s` for `s < seeds`. A failing run marks its cell;
/// the sweep carries on. Per-run outputs go to `out/cell_XXX/seed_YYY` when
/// `out` is given.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[toml::Value],
    seeds: usize,
    jobs: Option<usize>,
    out: Option<&Path>,
) -> Result<SweepReport> {
    if values.is_empty() || seeds == 0 {
        return Err(Error::config("sweep needs at least one value and one seed"));
    }
    let doc = toml::Value::try_from(base).map_err(|e| Error::config(e.to_string()))?;
    // Fail fast on an axis that does not resolve to a config field.
    let mut probe = doc.clone();
    set_path(&mut probe, axis, values[0].clone())?;
    probe
        .try_into::<ExperimentConfig>()
        .map_err(|e| Error::config(format!("sweep axis {axis:?}: {e}")))?;
    let jobs_list: Vec<(usize, usize)> = (0..values.len())
        .flat_map(|c| (0..seeds).map(move |s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(c, s)| {
                let dir = out.map(|o| o.join(format!("cell_{c:03}")).join(format!("seed_{s:03}")));
                run_cell(&doc, axis, &values[c], base.seed.wrapping_add(s as u64), dir.as_deref())
            })
            .collect()
    });
    let mut cells = Vec::with_capacity(values.len());
    for (c, value) in values.iter().enumerate() {
        let runs: Vec<SweepRun> = runs[c * seeds..(c + 1) * seeds].to_vec();
        let energies: Vec<f64> = runs.iter().filter(|r| !r.failed).filter_map(|r| r.final_energy).collect();
        let (mean, std) = if energies.is_empty() {
            (None, None)
        } else {
            let m = energies.iter().sum::<f64>() / energies.len() as f64;
            let v = if energies.len() > 1 {
                energies.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (energies.len() - 1) as f64
            } else {
                0.0
            };
            (Some(m), Some(v.sqrt()))
        };
        cells.push(SweepCell {
            value: value.clone(),
            failed: runs.iter().any(|r| r.failed),
            runs,
            mean_final_energy: mean,
            std_final_energy: std,
        });
    }
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        axis: axis.to_string(),
        seeds,
        cells,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("sweep.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
