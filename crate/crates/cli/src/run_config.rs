use crate::args::CommonArgs;
use anyhow::{Context, Result};
use serde::Deserialize;
use std::path::PathBuf;

/// Resolved settings for one command run.
///
/// Precedence: command-line flags override config-file values, which override
/// the built-in defaults. The config file is a flat JSON object with exactly
/// these field names.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub population: usize,
    pub timesteps: usize,
    pub epochs: usize,
    pub batch: usize,
    pub budget: usize,
    pub target_fpr: f64,
    pub alpha_grid: Vec<f64>,
    /// Months that belong to the training side of the temporal split; the
    /// last of them is held out as the validation month.
    pub train_months: u8,
    /// Epochs without validation-recall improvement before stopping (0: off).
    pub early_stop_patience: usize,
    pub rhoss_alpha: f64,
    pub rhoss_gamma: f64,
    pub rhoss_epsilon_start: f64,
    pub rhoss_epsilon_decay: f64,
    pub rhoss_epsilon_floor: f64,
    /// Default sample indices for `explain`.
    pub samples: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            schema: None,
            out: PathBuf::from("out"),
            seed: 42,
            population: 20,
            timesteps: 20,
            epochs: 10,
            batch: 32,
            budget: 20,
            target_fpr: 0.05,
            alpha_grid: mossti_core::fairness::DEFAULT_ALPHA_GRID.to_vec(),
            train_months: 6,
            early_stop_patience: 0,
            rhoss_alpha: 0.1,
            rhoss_gamma: 0.9,
            rhoss_epsilon_start: 1.0,
            rhoss_epsilon_decay: 0.99,
            rhoss_epsilon_floor: 0.05,
            samples: vec![0],
        }
    }
}

impl RunConfig {
    /// Defaults, then config file, then flags.
    pub fn resolve(common: &CommonArgs) -> Result<RunConfig> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config file {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config file {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &common.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &common.schema {
            cfg.schema = Some(v.clone());
        }
        if let Some(v) = &common.out {
            cfg.out = v.clone();
        }
        if let Some(v) = common.seed {
            cfg.seed = v;
        }
        if let Some(v) = common.population {
            cfg.population = v;
        }
        if let Some(v) = common.timesteps {
            cfg.timesteps = v;
        }
        if let Some(v) = common.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = common.batch {
            cfg.batch = v;
        }
        if let Some(v) = common.budget {
            cfg.budget = v;
        }
        if let Some(v) = common.target_fpr {
            cfg.target_fpr = v;
        }
        if let Some(v) = &common.alpha_grid {
            cfg.alpha_grid = v.clone();
        }
        Ok(cfg)
    }

    pub fn data_path(&self) -> Result<&PathBuf> {
        self.data
            .as_ref()
            .context("no data file given (use --data or the config file)")
    }

    pub fn schema_path(&self) -> Result<&PathBuf> {
        self.schema
            .as_ref()
            .context("no schema file given (use --schema or the config file)")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn flags_override_file_overrides_defaults() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(file, r#"{{"seed": 7, "epochs": 3, "population": 40}}"#).unwrap();
        let common = CommonArgs {
            config: Some(file.path().to_path_buf()),
            epochs: Some(9),
            ..CommonArgs::default()
        };
        let cfg = RunConfig::resolve(&common).unwrap();
        assert_eq!(cfg.seed, 7); // from file
        assert_eq!(cfg.epochs, 9); // flag wins over file
        assert_eq!(cfg.population, 40); // from file
        assert_eq!(cfg.batch, 128); // default
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(file, r#"{{"seeed": 7}}"#).unwrap();
        let common = CommonArgs {
            config: Some(file.path().to_path_buf()),
            ..CommonArgs::default()
        };
        assert!(RunConfig::resolve(&common).is_err());
    }
}
