//! Engine configuration file (TOML).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{load_generator, ToyGenerator};
use crate::losses::LossWeights;
use crate::perceptual::{BackendNames, Backends};
use crate::pipeline::{Budgets, Engine};
use crate::proxies::ToyBaldingMapper;
use crate::sketch::SketchInverter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub backend: String,
    pub weights_path: Option<PathBuf>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            backend: "toy".into(),
            weights_path: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SketchSection {
    /// Trained inverter weights; absent means the untrained mean-latent map.
    pub inverter_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub bind: String,
    pub store_dir: PathBuf,
    pub session_ttl_hours: u64,
    pub queue_capacity: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            bind: "127.0.0.1:8080".into(),
            store_dir: PathBuf::from("hairproxy-sessions"),
            session_ttl_hours: 24,
            queue_capacity: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub generator: GeneratorSection,
    pub backends: BackendNames,
    pub loss_weights: LossWeights,
    pub budgets: Budgets,
    pub sketch: SketchSection,
    pub service: ServiceSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::io::load_text(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.budgets.validate()?;
        if self.service.queue_capacity == 0 {
            return Err(Error::Config(
                "service.queue_capacity must be at least 1".into(),
            ));
        }
        if self.service.session_ttl_hours == 0 {
            return Err(Error::Config(
                "service.session_ttl_hours must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Builds the engine. Non-toy backends fail with `BackendUnavailable`.
    pub fn engine(&self) -> Result<Engine> {
        self.validate()?;
        let gen = load_generator(
            &self.generator.backend,
            self.generator.weights_path.as_deref(),
        )?;
        // Only the toy generator loads today, so the toy mapper always applies.
        let toy = ToyGenerator::default();
        let inverter = match &self.sketch.inverter_path {
            Some(p) => SketchInverter::load(p)?,
            None => SketchInverter::at_mean(&toy),
        };
        Ok(Engine {
            gen,
            backends: Backends::from_names(&self.backends)?,
            weights: self.loss_weights,
            budgets: self.budgets.clone(),
            mapper: Arc::new(ToyBaldingMapper::new(&toy)),
            inverter: Some(Arc::new(inverter)),
        })
    }
}
