use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tiling::TileSpec;
use crate::classical::ClassicalMethod;
use crate::color::DEFAULT_BINS;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "STAINKIT_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Reinhard,
    Macenko,
    Vahadane,
    /// The trained restaining network.
    Pidr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Reinhard, Method::Macenko, Method::Vahadane, Method::Pidr];

    pub fn classical(self) -> Option<ClassicalMethod> {
        match self {
            Method::Reinhard => Some(ClassicalMethod::Reinhard),
            Method::Macenko => Some(ClassicalMethod::Macenko),
            Method::Vahadane => Some(ClassicalMethod::Vahadane),
            Method::Pidr => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Reinhard => "reinhard",
            Method::Macenko => "macenko",
            Method::Vahadane => "vahadane",
            Method::Pidr => "pidr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected reinhard, macenko, vahadane or pidr")))
    }
}

/// Either a fixed template image or automatic selection from the inputs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum TemplateSource {
    #[default]
    Auto,
    Path(PathBuf),
}

impl From<String> for TemplateSource {
    fn from(s: String) -> Self {
        if s == "auto" {
            TemplateSource::Auto
        } else {
            TemplateSource::Path(PathBuf::from(s))
        }
    }
}

impl From<TemplateSource> for String {
    fn from(t: TemplateSource) -> Self {
        match t {
            TemplateSource::Auto => "auto".into(),
            TemplateSource::Path(p) => p.to_string_lossy().into_owned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    /// Loss-curve CSV; defaults to the checkpoint path with a `.loss.csv` suffix.
    pub loss_csv: Option<PathBuf>,
    /// Log a progress line every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 500,
            loss_csv: None,
            log_every: 50,
        }
    }
}

/// Everything one command run needs, loadable from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub input_dir: Option<PathBuf>,
    pub template: TemplateSource,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub domain_a_dir: Option<PathBuf>,
    pub domain_b_dir: Option<PathBuf>,
    pub reference_dir: Option<PathBuf>,
    pub bins: usize,
    pub tile: TileSpec,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub seed: u64,
    /// Worker threads for per-file work; 1 runs everything on the calling thread, 0 uses all cores.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::default(),
            input_dir: None,
            template: TemplateSource::Auto,
            output_dir: None,
            checkpoint: None,
            domain_a_dir: None,
            domain_b_dir: None,
            reference_dir: None,
            bins: DEFAULT_BINS,
            tile: TileSpec::default(),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            seed: 0,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        std::fs::read_to_string(path)
            .map_err(Error::from)
            .and_then(|t| Self::from_json(&t))
            .map_err(|e| e.at(path))
    }

    /// Applies an override seed string, as found in [`SEED_ENV`].
    pub fn override_seed(&mut self, value: &str) -> Result<()> {
        self.seed = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {value:?}")))?;
        Ok(())
    }

    /// Reads [`SEED_ENV`] if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.override_seed(&v),
            Err(_) => Ok(()),
        }
    }

    /// Model configuration with the run seed applied.
    pub fn seeded_model(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::InvalidBinCount(0));
        }
        if self.tile.tile_size == 0 {
            return Err(Error::Config("tile.tile_size must be positive".into()));
        }
        self.model.validate()
    }
}
