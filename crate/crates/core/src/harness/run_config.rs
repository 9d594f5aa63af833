//! Flat TOML run configuration covering model and training fields.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::harness::train::TrainConfig;

/// Environment variable overriding the training seed.
pub const SEED_ENV: &str = "CSFORMER_SEED";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    toml::Table::try_from(value).map(|t| t.keys().cloned().collect()).unwrap_or_default()
}

fn decode<T: DeserializeOwned>(table: toml::Table) -> Result<T> {
    T::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    /// Parses flat `key = value` pairs; every key must name a field of
    /// [`ModelConfig`] or [`TrainConfig`].
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let model_keys = keys_of(&ModelConfig::default());
        let train_keys = keys_of(&TrainConfig::default());
        let (mut model, mut train) = (toml::Table::new(), toml::Table::new());
        for (k, v) in table {
            if model_keys.contains(&k) {
                model.insert(k, v);
            } else if train_keys.contains(&k) {
                train.insert(k, v);
            } else {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
        }
        let cfg = RunConfig { model: decode(model)?, train: decode(train)? };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Flat TOML with every field.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(&self.model).expect("model config serialises");
        table.extend(toml::Table::try_from(&self.train).expect("train config serialises"));
        toml::to_string(&table).expect("table serialises")
    }

    /// Applies `CSFORMER_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed =
                v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an integer")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FusionMode;

    #[test]
    fn routes_keys_to_both_sections() {
        let cfg =
            RunConfig::parse("ratio = 0.1\nbase_channels = 64\nfusion_mode = \"add\"\niterations = 7\nseed = 3\n")
                .unwrap();
        assert_eq!(cfg.model.ratio, 0.1);
        assert_eq!(cfg.model.base_channels, 64);
        assert_eq!(cfg.model.fusion_mode, FusionMode::Add);
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.crop_size, 128);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(RunConfig::parse("colour = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("ratio = \"half\""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("patch_size = 48"), Err(Error::Config(_))));
    }

    #[test]
    fn serialised_form_parses_back() {
        let cfg = RunConfig { model: ModelConfig::desk(), train: TrainConfig { seed: 9, ..Default::default() } };
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
