use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::FitForm;
use crate::dynamics::{DynamicsConfig, SchemeRegistry};
use crate::ensemble::{Dist1, Sampler};
use crate::error::{Error, Result};
use crate::potentials::{ModelSpec, Potential};

/// Initial law of the particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub position: Sampler,
    /// Law of the output amplitude; required by models with an amplitude
    /// channel.
    #[serde(default)]
    pub amplitude: Option<Dist1>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRequest {
    pub form: FitForm,
    pub window: [f64; 2],
}

fn one() -> usize {
    1
}

/// One experiment, as read from a TOML file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub init: InitSpec,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    pub n: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub fits: Vec<FitRequest>,
    /// Inputs per evaluation batch for models without exact energies.
    #[serde(default)]
    pub eval_batch_size: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Builds the model and checks every cross-reference.
    pub fn validate(&self, registry: &SchemeRegistry) -> Result<Box<dyn Potential>> {
        if self.n == 0 {
            return Err(Error::config("n must be >= 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every must be >= 1"));
        }
        if self.snapshot_times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::config("snapshot times must be >= 0"));
        }
        if self.eval_batch_size == Some(0) {
            return Err(Error::config("eval_batch_size must be >= 1"));
        }
        for f in &self.fits {
            if !(f.window[0] < f.window[1]) {
                return Err(Error::config(format!("fit window {:?} is empty", f.window)));
            }
        }
        let model = self.model.build(self.seed)?;
        self.init.position.validate(model.dimension())?;
        match (&self.init.amplitude, model.has_amplitude()) {
            (Some(a), true) => a.validate()?,
            (None, true) => {
                return Err(Error::config(format!("{} needs init.amplitude", model.kind())));
            }
            (Some(_), false) => {
                return Err(Error::config(format!("{} has no amplitude channel", model.kind())));
            }
            (None, false) => {}
        }
        registry.get(&self.dynamics.variant)?.check(model.as_ref(), &self.dynamics)?;
        Ok(model)
    }
}
