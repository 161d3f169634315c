//! Instance configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::etl::Engine;
use crate::source::{Connector, FsConnector, RemoteProfile, SimulatedRemote};

#[derive(Debug, Clone, Deserialize)]
pub struct InstanceConfig {
    pub instance_id: String,
    pub listen: String,
    /// Repository root: journal and blob store live here.
    pub data_dir: PathBuf,
    /// Base URI advertised in share envelopes; defaults to `http://{listen}`.
    #[serde(default)]
    pub public_uri: Option<String>,
    #[serde(default)]
    pub sources: Vec<SourceConfig>,
    #[serde(default)]
    pub api_keys: Vec<ApiKeyConfig>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SourceConfig {
    pub root: PathBuf,
    /// Wrap the connector in simulated remote-access latency.
    #[serde(default)]
    pub remote: Option<RemoteProfile>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ApiKeyConfig {
    pub key: String,
    pub user: String,
}

impl InstanceConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn public_uri(&self) -> String {
        self.public_uri.clone().unwrap_or_else(|| format!("http://{}", self.listen))
    }

    /// Opens the configured sources and the instance directory.
    pub fn build_engine(&self) -> Result<Engine> {
        let mut connectors: Vec<Box<dyn Connector>> = Vec::new();
        for source in &self.sources {
            let fs = FsConnector::open(&source.root)?;
            match source.remote {
                Some(profile) => connectors.push(Box::new(SimulatedRemote::new(fs, profile))),
                None => connectors.push(Box::new(fs)),
            }
        }
        let mut engine = Engine::open(&self.data_dir, connectors)?;
        engine.set_instance_id(&self.instance_id);
        Ok(engine)
    }
}
