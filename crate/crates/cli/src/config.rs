//! Run configuration file.
//!
//! ```toml
//! output_dir = "runs/sml"
//!
//! [data]
//! path = "sml2010.csv"        # relative to this file
//! target = "Temp.room"
//! window = 20
//! horizon = 3
//! half_rate = true
//!
//! [model]
//! latent = 16
//! rnn_hidden = 32
//! d_model = 16
//! heads = 4
//! ablation = "full"           # full | no_self_att | no_zx_ode
//!
//! [training]
//! batch_size = 128
//! learning_rate = 0.001
//! max_epochs = 200
//! patience = 10
//! seeds = [0, 1, 2, 3, 4]
//!
//! [training.solver]
//! method = "rk4"              # euler | rk4 | dopri5
//! step = 0.1
//!
//! [eval]
//! steps = [1.0, 1.5, 2.0, 2.5, 3.0]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use egpde_core::data::DataConfig;
use egpde_core::model::{AblationMode, ModelConfig};
use egpde_core::ode::SolverConfig;
use egpde_core::training::TrainConfig;
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub target: String,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_true")]
    pub half_rate: bool,
}

fn default_window() -> usize {
    20
}

fn default_horizon() -> usize {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent: usize,
    pub rnn_hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ablation: AblationMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 1);
        Self {
            latent: m.latent,
            rnn_hidden: m.rnn_hidden,
            d_model: m.d_model,
            heads: m.heads,
            ablation: m.ablation,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub solver: SolverConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seeds: vec![0, 1, 2, 3, 4],
            solver: t.solver,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub steps: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            steps: vec![1.0, 1.5, 2.0, 2.5, 3.0],
        }
    }
}

impl RunConfig {
    /// Reads and validates a config; a relative dataset path is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.data.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.data.path.is_file(),
            "dataset not found: {}",
            self.data.path.display()
        );
        ensure!(!self.training.seeds.is_empty(), "training.seeds must not be empty");
        parse_steps_list(&self.eval.steps)?;
        self.train_config(0).validate()?;
        self.model_config(1).validate()?;
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            window: self.data.window,
            horizon: self.data.horizon,
            half_rate: self.data.half_rate,
        }
    }

    pub fn model_config(&self, n_exogenous: usize) -> ModelConfig {
        ModelConfig {
            window: self.data.window,
            n_exogenous,
            horizon: self.data.horizon,
            latent: self.model.latent,
            rnn_hidden: self.model.rnn_hidden,
            d_model: self.model.d_model,
            heads: self.model.heads,
            ablation: self.model.ablation,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            max_epochs: self.training.max_epochs,
            patience: self.training.patience,
            seed,
            solver: self.training.solver,
            ..TrainConfig::default()
        }
    }
}

/// Parses `"1,1.5,2"` into strictly increasing positive steps.
pub fn parse_steps(text: &str) -> Result<Vec<f64>> {
    let steps = text
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .with_context(|| format!("invalid step {s:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    parse_steps_list(&steps)?;
    Ok(steps)
}

fn parse_steps_list(steps: &[f64]) -> Result<()> {
    ensure!(!steps.is_empty(), "at least one step is required");
    if let Some(s) = steps.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        bail!("steps must be positive and finite, got {s}");
    }
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        bail!("steps must be strictly increasing");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        std::fs::write(dir.join("data.csv"), "a,y\n1,2\n").unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "[data]\npath = \"data.csv\"\ntarget = \"y\"\n");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.path, dir.path().join("data.csv"));
        assert_eq!(cfg.training.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.eval.steps, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(cfg.model_config(13).latent, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "[data]\npath = \"data.csv\"\ntarget = \"y\"\n[training]\nlearning_rat = 0.1\n",
        );
        let err = format!("{:#}", RunConfig::load(&path).unwrap_err());
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn missing_dataset_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "[data]\npath = \"nope.csv\"\ntarget = \"y\"\n");
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("nope.csv"), "{err}");
    }

    #[test]
    fn steps() {
        assert_eq!(parse_steps("1, 1.5,2").unwrap(), vec![1.0, 1.5, 2.0]);
        assert_eq!(parse_steps("0.5").unwrap(), vec![0.5]);
        assert_eq!(
            parse_steps("2,1").unwrap_err().to_string(),
            "steps must be strictly increasing"
        );
        assert!(parse_steps("1,x").is_err());
        assert!(parse_steps("0,1").is_err());
    }
}
