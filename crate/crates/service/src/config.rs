use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use forge_core::critic::RealismCritic;
use forge_core::estimator::ParamEstimator;
use forge_core::objective::ObjectiveConfig;
use forge_core::pipeline::Models;
use forge_core::saliency::{load_backend, Direction, SaliencyConfig};
use forge_core::{ForgeError, Result};
use serde::{Deserialize, Serialize};

pub const HOME_ENV: &str = "FORGE_HOME";

/// Checkpoint locations; relative paths resolve against the artifact root.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelPaths {
    pub critic: Option<PathBuf>,
    pub attenuate: Option<PathBuf>,
    pub amplify: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    /// Concurrent training jobs.
    pub job_workers: usize,
    /// Artifact root used when `FORGE_HOME` is unset.
    pub home: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            job_workers: 1,
            home: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub models: ModelPaths,
    pub saliency: SaliencyConfig,
    pub objective: ObjectiveConfig,
    pub server: ServerConfig,
}

impl ForgeConfig {
    /// Reads TOML or JSON, chosen by file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ForgeError::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let config: ForgeConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).map_err(|e| ForgeError::Config(format!("{}: {e}", path.display())))?,
        };
        config.objective.validate()?;
        Ok(config)
    }

    /// `FORGE_HOME`, then `[server].home`, then `./forge_home`.
    pub fn home(&self) -> PathBuf {
        std::env::var_os(HOME_ENV)
            .map(PathBuf::from)
            .or_else(|| self.server.home.clone())
            .unwrap_or_else(|| PathBuf::from("forge_home"))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.home().join(path)
        }
    }

    /// Loads every configured checkpoint; a missing file fails with its path.
    pub fn load_models(&self) -> Result<Models> {
        let critic_path = self
            .models
            .critic
            .as_ref()
            .ok_or_else(|| ForgeError::Config("[models].critic is required".into()))?;
        let critic = RealismCritic::load(self.resolve(critic_path))?;
        let estimator = |path: &Option<PathBuf>, direction: Direction| -> Result<Option<Arc<ParamEstimator>>> {
            let Some(p) = path else { return Ok(None) };
            let full = self.resolve(p);
            let model = ParamEstimator::load(&full)?;
            if model.direction() != direction {
                return Err(ForgeError::State(format!(
                    "{} holds a {} estimator but is configured for {direction}",
                    full.display(),
                    model.direction()
                )));
            }
            Ok(Some(Arc::new(model)))
        };
        Ok(Models {
            attenuate: estimator(&self.models.attenuate, Direction::Attenuate)?,
            amplify: estimator(&self.models.amplify, Direction::Amplify)?,
            critic: Arc::new(critic),
            saliency: load_backend(&self.saliency)?,
            objective: self.objective.clone(),
        })
    }
}
