//! The run configuration file.
//!
//! A single TOML document drives every command:
//!
//! ```toml
//! config_version = 1
//! seed = 7
//!
//! [paths]
//! taxonomy = "taxonomy.toml"
//! embeddings = "vectors.txt"
//! definitions = "definitions.tsv"
//! dataset = "all.tsv"          # or train/validation/test
//! output = "runs/demo"
//!
//! [split]
//! ratios = [0.8, 0.1, 0.1]
//!
//! [embeddings]
//! mean_denominator = "all"
//!
//! [train]
//! embedding_dim = 300
//! aux_enabled = true
//!
//! [decode]
//! mode = "adapted_beam"
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::path::{Path, PathBuf};

use seqhtc::decode::DecodeConfig;
use seqhtc::embeddings::MeanDenominator;
use seqhtc::training::TrainConfig;
use seqhtc::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    /// The only seed; `train.seed` and the split seed derive from it.
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub embeddings: EmbeddingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub taxonomy: PathBuf,
    pub embeddings: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definitions: Option<PathBuf>,
    /// Precomputed CDV store; also where `cdv-build` writes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdv: Option<PathBuf>,
    /// A single labelled file, split by `split.ratios`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Read at most this many vectors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub mean_denominator: MeanDenominator,
}

/// Where the labelled documents come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource<'a> {
    Single(&'a Path),
    Splits {
        train: &'a Path,
        validation: &'a Path,
        test: &'a Path,
    },
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `dotted.key=value` pairs; values parse as TOML, falling back to a string.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    /// Output directory, relative to the working directory.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads, overrides, resolves and validates a configuration file.
    pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml_str(&text, base, overrides)
    }

    pub fn from_toml_str(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        for item in &overrides.set {
            apply_override(&mut doc, item)?;
        }
        let mut config: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.resolve_paths(base);
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.paths.output = out.clone();
        }
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        fix(&mut p.taxonomy);
        fix(&mut p.embeddings);
        fix(&mut p.output);
        for p in [
            &mut p.definitions,
            &mut p.cdv,
            &mut p.dataset,
            &mut p.train,
            &mut p.validation,
            &mut p.test,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        self.train.validate()?;
        self.decode.validate()?;
        let r = self.split.ratios;
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {r:?} must be non-negative and sum to 1"
            )));
        }
        self.data_source()?;
        let p = &self.paths;
        let mut required = vec![("paths.taxonomy", &p.taxonomy), ("paths.embeddings", &p.embeddings)];
        let optional = [
            ("paths.definitions", &p.definitions),
            ("paths.dataset", &p.dataset),
            ("paths.train", &p.train),
            ("paths.validation", &p.validation),
            ("paths.test", &p.test),
        ];
        required.extend(optional.iter().filter_map(|(k, v)| v.as_ref().map(|v| (*k, v))));
        for (key, path) in required {
            if !path.is_file() {
                return Err(Error::Config(format!("{key}: {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn data_source(&self) -> Result<DataSource<'_>> {
        let p = &self.paths;
        match (&p.dataset, &p.train, &p.validation, &p.test) {
            (Some(d), None, None, None) => Ok(DataSource::Single(d)),
            (None, Some(train), Some(validation), Some(test)) => Ok(DataSource::Splits {
                train,
                validation,
                test,
            }),
            (None, None, None, None) => Err(Error::Config(
                "set paths.dataset, or all of paths.train, paths.validation and paths.test".into(),
            )),
            _ => Err(Error::Config(
                "paths.dataset excludes paths.train/validation/test, and those three go together".into(),
            )),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for part in parents {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    if matches!(table.get(*last), Some(toml::Value::Table(_))) {
        return Err(Error::Config(format!("override {key:?} names a table, not a scalar")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}
