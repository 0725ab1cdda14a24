use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{AgeBins, SchemaConfig};
use crate::error::{Error, Result};
use crate::ppc::DEFAULT_REPS;
use crate::poststrat::DEFAULT_GROUPINGS;
use crate::sampler::SamplerConfig;

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub records: Option<PathBuf>,
    /// Population counts by zip, sex, age and race.
    pub acs: Option<PathBuf>,
    pub crosswalk: Option<PathBuf>,
    pub tracts: Option<PathBuf>,
    /// Use the preprocess artifacts of another run directory instead of
    /// running preprocessing here.
    pub preprocessed: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub age_breaks: Vec<u32>,
    pub week_origin: Option<NaiveDate>,
    /// Delimiter of the population, crosswalk and tract files.
    pub delimiter: String,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            age_breaks: vec![0, 18, 35, 50, 65, 75],
            week_origin: None,
            delimiter: ",".into(),
        }
    }
}

impl PreprocessConfig {
    pub fn age_bins(&self) -> Result<AgeBins> {
        AgeBins::from_breaks(&self.age_breaks)
    }

    pub fn delimiter_byte(&self) -> Result<u8> {
        SchemaConfig {
            delimiter: self.delimiter.clone(),
            ..SchemaConfig::default()
        }
        .delimiter_byte()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub ppc_reps: usize,
    pub ppc_group: String,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            ppc_reps: DEFAULT_REPS,
            ppc_group: "week".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoststratConfig {
    pub groupings: Vec<String>,
}

impl Default for PoststratConfig {
    fn default() -> Self {
        PoststratConfig {
            groupings: DEFAULT_GROUPINGS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Everything a run needs. Stored verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds imputation, sampling and replicate draws.
    pub seed: u64,
    pub inputs: Inputs,
    pub schema: SchemaConfig,
    pub preprocess: PreprocessConfig,
    pub sampler: SamplerConfig,
    /// Preset names (`A`, `B`, `C`) or paths to model spec JSON files.
    pub models: Vec<String>,
    pub diagnose: DiagnoseConfig,
    pub poststratify: PoststratConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            inputs: Inputs::default(),
            schema: SchemaConfig::default(),
            preprocess: PreprocessConfig::default(),
            sampler: SamplerConfig::default(),
            models: vec!["A".into()],
            diagnose: DiagnoseConfig::default(),
            poststratify: PoststratConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and makes its relative paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.inputs.records);
        fix(&mut self.inputs.acs);
        fix(&mut self.inputs.crosswalk);
        fix(&mut self.inputs.tracts);
        fix(&mut self.inputs.preprocessed);
        for m in &mut self.models {
            if m.ends_with(".json") && Path::new(m).is_relative() {
                *m = base.join(&*m).to_string_lossy().into_owned();
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sampler settings with the run seed applied.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sampler.clone()
        }
    }
}
