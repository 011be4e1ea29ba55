//! Run configuration: one TOML document covering data generation, model
//! shape, training, and sampling. Unknown keys are rejected everywhere so a
//! typo fails loudly instead of silently falling back to a default.
//!
//! Seed precedence is `--seed` flag, then the `SEDA_SEED` environment
//! variable, then the `seed` key in the file. A `data.seed` of zero means
//! "inherit the run seed", so one number can pin an entire pipeline.

use std::fs;
use std::path::Path;

use seda_core::data::SyntheticSpec;
use seda_core::denoiser::{Activation, DenoiserConfig};
use seda_core::sampler::SamplingOptions;
use seda_core::trainer::TrainConfig;
use seda_core::{Result, SedaError};
use serde::{Deserialize, Serialize};

pub const SEED_ENV_VAR: &str = "SEDA_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: SamplingOptions,
}

/// Architecture knobs that do not live in the training section. The feature
/// width always comes from the data section, so it is not repeated here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub token_count: usize,
    pub attention_heads: usize,
    /// Decoder hidden widths; `None` means twice the feature width, twice.
    pub decoder_hidden: Option<Vec<usize>>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            token_count: 8,
            attention_heads: 1,
            decoder_hidden: None,
            activation: Activation::Silu,
        }
    }
}

impl ModelSection {
    pub fn to_denoiser(&self, feature_dim: usize) -> DenoiserConfig {
        let mut config = DenoiserConfig::new(feature_dim);
        config.token_count = self.token_count;
        config.attention_heads = self.attention_heads;
        if let Some(hidden) = &self.decoder_hidden {
            config.decoder_hidden = hidden.clone();
        }
        config.activation = self.activation;
        config
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.sampling.validate()?;
        self.model.to_denoiser(self.data.feature_dim).validate()
    }

    /// The data spec with seed inheritance applied.
    pub fn data_spec(&self, run_seed: u64) -> SyntheticSpec {
        let mut spec = self.data.clone();
        if spec.seed == 0 {
            spec.seed = run_seed;
        }
        spec
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| SedaError::invalid(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| {
        // toml renders a multi-line span diagnostic; flatten it so the shell
        // sees a single line naming the offending key
        let flat = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        SedaError::invalid(format!("{}: {flat}", path.display()))
    })?;
    config.validate()?;
    Ok(config)
}

/// Flag beats environment beats config file.
pub fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text.trim().parse::<u64>().map_err(|_| {
            SedaError::invalid(format!(
                "{SEED_ENV_VAR} is set to {text:?}, which is not an unsigned integer"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(config_seed),
        Err(std::env::VarError::NotUnicode(_)) => Err(SedaError::invalid(format!(
            "{SEED_ENV_VAR} holds invalid unicode"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use seda_core::data::LabelMode;
    use std::io::Write;

    fn minimal_toml() -> &'static str {
        r#"
seed = 7

[train]
epochs = 2

[train.staged]
alpha1 = 1.0
alpha2 = 1.0
beta = 1.5
gamma = 1.5
staged_step = 50
label_mode = "single"
"#
    }

    fn write_config(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let (_dir, path) = write_config(minimal_toml());
        let config = load_config(&path).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.data.feature_dim, 64);
        assert_eq!(config.model.token_count, 8);
        assert_eq!(config.train.batch_size, 64);
        assert_eq!(config.train.staged.label_mode, LabelMode::Single);
        assert_eq!(config.sampling.stride, 1);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let text = format!("{}\n[sampling]\nnoise_scael = 1.0\n", minimal_toml());
        let (_dir, path) = write_config(&text);
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("noise_scael"), "error was: {err}");
        // single line for the shell
        assert!(!err.contains('\n'), "error spans lines: {err}");
    }

    #[test]
    fn invalid_values_are_rejected_at_load() {
        let text = minimal_toml().replace("epochs = 2", "epochs = 0");
        let (_dir, path) = write_config(&text);
        assert!(load_config(&path).is_err());
    }

    #[test]
    fn flag_beats_env_beats_config() {
        // the env var cannot be exercised safely in-process (tests share the
        // environment), so the env arm is covered by the binary-level suite
        assert_eq!(resolve_seed(Some(3), 7).unwrap(), 3);
        if std::env::var(SEED_ENV_VAR).is_err() {
            assert_eq!(resolve_seed(None, 7).unwrap(), 7);
        }
    }

    #[test]
    fn zero_data_seed_inherits_the_run_seed() {
        let (_dir, path) = write_config(minimal_toml());
        let config = load_config(&path).unwrap();
        assert_eq!(config.data.seed, 0);
        assert_eq!(config.data_spec(41).seed, 41);

        // a nonzero data seed is taken literally
        let text = format!(
            "seed = 7\n\n[data]\nseed = 5\n{}",
            minimal_toml().replace("seed = 7\n", "")
        );
        let (_dir2, path2) = write_config(&text);
        let config = load_config(&path2).unwrap();
        assert_eq!(config.data_spec(41).seed, 5);
    }
}
