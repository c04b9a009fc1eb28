//! Versioned JSON run configurations.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::experiment::{FrameSpec, Scenario};
use crate::inference::FitOptions;
use crate::latent::ModelSpec;
use crate::simgen::GenConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Input of `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    pub generator: GenConfig,
}

/// Input of `fit`: the model, how frames are built and the fit options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    #[serde(default = "default_frames")]
    pub frames: FrameSpec,
    #[serde(default)]
    pub options: FitOptions,
}

/// Input of `experiment`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    pub scenarios: Vec<Scenario>,
}

fn one() -> usize {
    1
}

fn default_frames() -> FrameSpec {
    FrameSpec::time_stratified(3)
}

trait Versioned {
    fn schema_version(&self) -> u32;
}

impl Versioned for SimulateConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}
impl Versioned for FitConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}
impl Versioned for ExperimentConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

/// Parses a config, naming the offending field on failure.
#[allow(private_bounds)]
pub fn parse_config<T: DeserializeOwned + Versioned>(bytes: &[u8]) -> Result<T, String> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let value: T = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            e.inner().to_string()
        } else {
            format!("field `{path}`: {}", e.inner())
        }
    })?;
    if value.schema_version() != SCHEMA_VERSION {
        return Err(format!(
            "field `schema_version`: unsupported version {} (expected {SCHEMA_VERSION})",
            value.schema_version()
        ));
    }
    Ok(value)
}
