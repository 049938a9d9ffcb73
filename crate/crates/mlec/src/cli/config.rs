//! Run configuration: one nested TOML file covering every stage, with
//! dotted-path `--set key=value` overrides. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::trainer::TrainConfig;
use crate::tuner::Objective;

use super::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every component derives its own stream from it.
    pub seed: u64,
    pub out_dir: String,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub tune: TuneSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            tune: TuneSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Record file to ingest; `synthetic` generates a corpus instead.
    pub input: Option<String>,
    pub synthetic: Option<usize>,
    pub avg_labels_per_sample: f64,
    pub train_fraction: f64,
    /// Keep samples whose label vector is all zero.
    pub allow_zero_labels: bool,
    pub max_vocab: usize,
    pub min_token_freq: usize,
    pub max_seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            input: None,
            synthetic: None,
            avg_labels_per_sample: 3.0,
            train_fraction: 0.8,
            allow_zero_labels: true,
            max_vocab: 4096,
            min_token_freq: 1,
            max_seq_len: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSettings {
    pub trials: usize,
    pub startup_trials: usize,
    pub gamma: f64,
    pub candidates: usize,
    pub objective: Objective,
    /// Restrict the learning-rate dimension to the narrow range.
    pub lr_narrow: bool,
    /// Epochs per trial; defaults to the train epochs when absent.
    pub trial_epochs: Option<usize>,
}

impl Default for TuneSettings {
    fn default() -> Self {
        TuneSettings {
            trials: 10,
            startup_trials: 5,
            gamma: 0.25,
            candidates: 24,
            objective: Objective::MinValLoss,
            lr_narrow: false,
            trial_epochs: None,
        }
    }
}

impl RunConfig {
    /// Loads the config file (when given), then applies `--set` overrides
    /// in order.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                text.parse::<toml::Value>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => {
                toml::Value::try_from(RunConfig::default()).expect("default config serializes")
            }
        };
        for set in sets {
            apply_set(&mut value, set)?;
        }
        value
            .try_into()
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Applies one `key.path=value` override onto the TOML tree.
fn apply_set(root: &mut toml::Value, set: &str) -> Result<(), CliError> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set needs key=value, got `{set}`")))?;
    let parsed = parse_toml_scalar(raw);
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}` crosses a non-table value")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

/// Leniently parses a scalar: TOML literal when valid, bare string
/// otherwise.
fn parse_toml_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").expect("v was inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.train.epochs, 20);
        assert_eq!(back.train.val_batch_size, 4);
        assert_eq!(back.data.max_seq_len, 256);
        assert_eq!(back.tune.trials, 10);
    }

    #[test]
    fn set_overrides_nested_values() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.epochs=3".to_string(),
                "decoder.kind=lstm".to_string(),
                "data.train_fraction=0.75".to_string(),
                "tune.lr_narrow=true".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.decoder.kind, crate::decoder::DecoderKind::Lstm);
        assert_eq!(cfg.data.train_fraction, 0.75);
        assert!(cfg.tune.lr_narrow);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["train.bogus=1".to_string()]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = RunConfig::load(None, &["nonsense=1".to_string()]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn config_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\n[train]\nepochs = 2\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 2);
        // untouched sections keep defaults
        assert_eq!(cfg.data.max_seq_len, 256);
    }
}
