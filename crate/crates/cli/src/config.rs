use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcnet_core::dataio::{PreprocessSpec, SynthSpec};
use tcnet_core::tcnet::{NetworkConfig, TrainConfig};
use tcnet_core::{Error, Result};

/// Everything one run needs. Every field has a default; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: SynthSpec,
    pub preprocess: PreprocessSpec,
    pub paths: Paths,
    /// Voxel spacing (z, y, x) in millimetres for surface distances.
    pub spacing_mm: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "runs/default".into(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            data: SynthSpec::default(),
            preprocess: PreprocessSpec::default(),
            paths: Paths::default(),
            spacing_mm: [1.0; 3],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(vec![format!("{path}: {}", e.into_inner())])
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// All problems of every section, each prefixed with its section name.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |section: &str, r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(p)) => problems.extend(p.into_iter().map(|m| format!("{section}: {m}"))),
            Err(e) => problems.push(format!("{section}: {e}")),
        };
        collect("network", self.network.validate());
        collect("train", self.train.validate());
        collect("data", self.data.validate());
        if self.preprocess.side != self.network.input_side {
            collect(
                "preprocess.side",
                Err(Error::Config(vec![format!(
                    "{} differs from network.input_side {}",
                    self.preprocess.side, self.network.input_side
                )])),
            );
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            collect(
                "spacing_mm",
                Err(Error::Config(vec!["spacings must be positive".into()])),
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
