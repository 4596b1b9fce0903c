//! Run configuration: one TOML file with a section per stage, plus
//! `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use hwid_core::calibrate::CalibrationConfig;
use hwid_core::contrastive::{ContrastConfig, PretrainConfig};
use hwid_core::corpus::CorpusParams;
use hwid_core::encoder::EncoderConfig;
use hwid_core::evaluate::EvalConfig;
use hwid_core::matching::MatchingConfig;
use hwid_core::patches::AugmentPolicy;
use hwid_core::prefilter::FilterConfig;
use hwid_core::seed;

/// Environment variable naming the directory that relative run directories
/// are resolved against.
pub const RUN_ROOT_ENV: &str = "HWID_RUN_ROOT";

/// Sections whose `seed` field is derived from the global seed rather than
/// read from the file.
const DERIVED_SEEDS: [&str; 5] = ["corpus", "patches", "encoder", "contrastive", "calibration"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Number of pre-training images that get a patch-weight heatmap.
    pub heatmaps: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { heatmaps: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Pre-training checkpoint cadence in steps; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub corpus: CorpusParams,
    pub filter: FilterConfig,
    /// Augmentation applied to the two views during pre-training.
    pub patches: AugmentPolicy,
    pub encoder: EncoderConfig,
    pub matching: MatchingConfig,
    pub contrastive: ContrastConfig,
    pub calibration: CalibrationConfig,
    pub evaluation: EvalConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            checkpoint_interval: 100,
            corpus: CorpusParams::default(),
            filter: FilterConfig::default(),
            patches: AugmentPolicy::default(),
            encoder: EncoderConfig::default(),
            matching: MatchingConfig::default(),
            contrastive: ContrastConfig::default(),
            calibration: CalibrationConfig::default(),
            evaluation: EvalConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                text.parse::<Table>()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
            None => Table::new(),
        };
        reject_stage_seeds(&table)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        reject_stage_seeds(&table)?;
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table = text
            .parse::<Table>()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        reject_stage_seeds(&table)?;
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// The file form: every field spelled out, stage seeds omitted.
    pub fn to_toml(&self) -> String {
        let mut value = Value::try_from(self).expect("config serializes");
        if let Value::Table(t) = &mut value {
            for section in DERIVED_SEEDS {
                if let Some(Value::Table(s)) = t.get_mut(section) {
                    s.remove("seed");
                }
            }
        }
        toml::to_string_pretty(&value).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |section: &str, r: hwid_core::Result<()>| {
            r.map_err(|e| ConfigError::Invalid(format!("[{section}] {e}")))
        };
        wrap("corpus", self.corpus.validate())?;
        wrap("filter", self.filter.validate())?;
        wrap("patches", self.patches.validate())?;
        wrap("encoder", self.encoder.validate())?;
        wrap("matching", self.matching.validate())?;
        wrap("contrastive", self.contrastive.validate())?;
        wrap("calibration", self.calibration.validate())?;
        if self.corpus.patch_size != self.encoder.patch_size {
            return Err(ConfigError::Invalid(format!(
                "corpus.patch_size = {} but encoder.patch_size = {}",
                self.corpus.patch_size, self.encoder.patch_size
            )));
        }
        let p = self.encoder.patch_size;
        let tokens = (self.corpus.image_height / p) * (self.corpus.image_width / p);
        if tokens != self.encoder.token_len {
            return Err(ConfigError::Invalid(format!(
                "a {}x{} image has {tokens} patches of size {p} but encoder.token_len = {}",
                self.corpus.image_height, self.corpus.image_width, self.encoder.token_len
            )));
        }
        if self.evaluation.seeds.is_empty() {
            return Err(ConfigError::Invalid(
                "evaluation.seeds must not be empty".into(),
            ));
        }
        Ok(())
    }

    /// Stage configs with their seeds filled in from the global seed.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.corpus.seed = seed::derive(self.seed, "corpus");
        c.patches.seed = seed::derive(self.seed, "augment");
        c.encoder.seed = seed::derive(self.seed, "encoder");
        c.contrastive.seed = seed::derive(self.seed, "contrastive");
        c.calibration.seed = seed::derive(self.seed, "calibration");
        c
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let r = self.resolved();
        PretrainConfig {
            contrast: r.contrastive,
            matching: r.matching,
            augment: r.patches,
        }
    }

    /// Seed used to draw test-time damage for a listed evaluation seed.
    pub fn evaluation_seed(&self, listed: u64) -> u64 {
        seed::derive_indexed(self.seed, "evaluation", &[listed])
    }

    /// `run_dir`, resolved against the run-root variable when relative.
    pub fn run_dir_in(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.run_dir.is_relative() => r.join(&self.run_dir),
            _ => self.run_dir.clone(),
        }
    }
}

fn reject_stage_seeds(table: &Table) -> Result<(), ConfigError> {
    for section in DERIVED_SEEDS {
        if let Some(Value::Table(s)) = table.get(section) {
            if s.contains_key("seed") {
                return Err(ConfigError::Invalid(format!(
                    "{section}.seed cannot be set; stage seeds are derived from the top-level `seed`"
                )));
            }
        }
    }
    Ok(())
}

/// Set a dotted key; the value is parsed as TOML, falling back to a string.
fn apply_override(table: &mut Table, text: &str) -> Result<(), ConfigError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(text.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(text.to_string()));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for (depth, part) in parts.iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(ConfigError::Invalid(format!(
                    "`{}` is not a section",
                    parts[..=depth].join(".")
                )))
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
