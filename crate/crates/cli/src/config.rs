//! Optional TOML run configuration.
//!
//! Every key is optional; command-line flags and environment variables take
//! precedence over the file.
//!
//! ```toml
//! epsilon = 0.1
//! seed = 7
//! window = 500
//! ratio_threshold = 1.5
//! temperature = "fit"      # "off", "fit", "model" or a number
//!
//! [profile]
//! kind = "uncertain"
//! class_count = 10
//! accuracy_curve = [0.97, 0.75, 0.55, 0.42, 0.33, 0.28]
//! concentration_curve = [8.0, 2.0, 1.0, 0.7, 0.5, 0.45]
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use apsmon::simulator::ModelProfile;
use serde::Deserialize;

use crate::exit::{CliError, CliResult};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub window: Option<usize>,
    pub ratio_threshold: Option<f64>,
    pub min_fill: Option<usize>,
    pub size_floor: Option<f64>,
    pub temperature: Option<TemperatureMode>,
    pub profile: Option<ModelProfile>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::parse(format!("cannot read config {}: {e}", path.display())))?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| CliError::parse(format!("config {}: {e}", path.display())))?;
        if let Some(profile) = &config.profile {
            profile.validate()?;
        }
        Ok(config)
    }
}

/// How logits are turned into probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemperatureMode {
    Off,
    /// Fit on the calibration logits (calibrate only).
    Fit,
    /// Use the temperature stored in the model (predict/monitor only).
    Model,
    Fixed(f64),
}

impl FromStr for TemperatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(Self::Off),
            "fit" => Ok(Self::Fit),
            "model" | "fit-from-model" => Ok(Self::Model),
            other => match other.parse::<f64>() {
                Ok(t) if t > 0.0 && t.is_finite() => Ok(Self::Fixed(t)),
                _ => Err(format!(
                    "expected off, fit, model or a positive number, got {other:?}"
                )),
            },
        }
    }
}

impl<'de> Deserialize<'de> for TemperatureMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(t) => t.to_string().parse(),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}
