//! Run configuration files and dataset sources.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dualfete_core::segnet::NetConfig;
use dualfete_core::synthdata::{synthetic_dataset, DataConfig, Dataset};
use dualfete_core::trainer::TrainConfig;

use crate::error::{HarnessError, Result};
use crate::manifest;

fn config_error(path: &Path, detail: impl ToString) -> HarnessError {
    HarnessError::Config { path: path.display().to_string(), detail: detail.to_string() }
}

/// Parse and validate a training config. Unknown keys are rejected.
pub fn parse_train_config(text: &str, origin: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| config_error(origin, e))?;
    cfg.validate().map_err(|e| config_error(origin, e))?;
    Ok(cfg)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_train_config(&text, path)
}

/// Where a dataset comes from: `synthetic:SEED` or a manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(u64),
    Dir(PathBuf),
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.strip_prefix("synthetic:") {
            Some(seed) => seed.parse().map(DataSource::Synthetic).map_err(|_| format!("bad synthetic seed `{seed}`")),
            None if s.is_empty() => Err("empty data source".into()),
            None => Ok(DataSource::Dir(PathBuf::from(s))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Synthetic(seed) => write!(f, "synthetic:{seed}"),
            DataSource::Dir(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Default synthetic split at the network's resolution.
pub fn synthetic_for(net: &NetConfig, seed: u64) -> DataConfig {
    DataConfig { seed, height: net.height, width: net.width, ..DataConfig::default() }
}

/// Load a dataset and check it fits the network.
pub fn load_data(source: &DataSource, net: &NetConfig) -> Result<Dataset> {
    match source {
        DataSource::Synthetic(seed) => Ok(synthetic_dataset(&synthetic_for(net, *seed))?),
        DataSource::Dir(dir) => {
            let (data, classes) = manifest::import(dir)?;
            let first = data.labeled.iter().chain(&data.unlabeled).chain(&data.test).next();
            if let Some(s) = first {
                if (s.image.height, s.image.width) != (net.height, net.width) {
                    return Err(config_error(dir, format!("images are {}x{} but the network expects {}x{}", s.image.height, s.image.width, net.height, net.width)));
                }
            }
            if classes > net.num_classes {
                return Err(config_error(dir, format!("{classes} label classes but the network has {}", net.num_classes)));
            }
            Ok(data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_the_field_name() {
        let err = parse_train_config(r#"{"steps": 3, "stepz": 4}"#, Path::new("c.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("stepz"), "{err}");
        let nested = parse_train_config(r#"{"net": {"depth": 1, "widht": 4}}"#, Path::new("c.json")).unwrap_err();
        assert!(nested.to_string().contains("widht"), "{nested}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = parse_train_config(r#"{"confidence_threshold": 1.5}"#, Path::new("c.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("confidence_threshold"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = parse_train_config(r#"{"steps": 7, "mode": "dual_no_feedback", "net": {"height": 16, "width": 16}}"#, Path::new("c.json")).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.net.height, 16);
        assert_eq!(cfg.batch_unlabeled, TrainConfig::default().batch_unlabeled);
    }

    #[test]
    fn data_source_parsing() {
        assert_eq!("synthetic:12".parse::<DataSource>().unwrap(), DataSource::Synthetic(12));
        assert!("synthetic:x".parse::<DataSource>().is_err());
        assert_eq!("some/dir".parse::<DataSource>().unwrap(), DataSource::Dir("some/dir".into()));
        assert_eq!(DataSource::Synthetic(5).to_string(), "synthetic:5");
    }
}
