//! Configuration documents. Files ending in `.toml` are read as TOML,
//! anything else as JSON. Missing fields take their built-in defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cmems::synthesis::SynthesisConfig;
use cmems::toybench::{self, ToySpec, Variant};
use cmems::trainer::TrainConfig;

/// Bad user input: maps to exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Training run: dataset manifest, synthesis settings and optimiser settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest. Relative paths resolve against the config file.
    pub data: Option<PathBuf>,
    pub synthesis: SynthesisConfig,
    pub train: TrainConfig,
}

/// Toy ablation: data generator, synthesis, the full training
/// configuration, and the variants and seeds to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub toy: ToySpec,
    pub synthesis: SynthesisConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            toy: ToySpec::default(),
            synthesis: SynthesisConfig::default(),
            train: toybench::toy_train_config(),
            variants: Variant::COMPONENTS.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Reads a document, or returns the defaults when `path` is `None`.
pub fn read_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    if !path.is_file() {
        return Err(invalid(format!("config file {} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let parsed = if is_toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Resolves a path from a config file against that file's directory.
pub fn relative_to(config: Option<&Path>, p: &Path) -> PathBuf {
    match config.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_and_toml_agree() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("a.json");
        let t = dir.path().join("a.toml");
        std::fs::write(&j, r#"{"data": "m.json", "train": {"seed": 4, "lr": 0.001}}"#).unwrap();
        std::fs::write(&t, "data = \"m.json\"\n[train]\nseed = 4\nlr = 0.001\n").unwrap();
        let a: RunConfig = read_or_default(Some(&j)).unwrap();
        let b: RunConfig = read_or_default(Some(&t)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.seed, 4);
        assert_eq!(a.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_fields_and_missing_files_are_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("a.json");
        std::fs::write(&j, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
        let e = read_or_default::<RunConfig>(Some(&j)).unwrap_err();
        assert!(e.is::<Invalid>());
        let e = read_or_default::<RunConfig>(Some(&dir.path().join("nope.json"))).unwrap_err();
        assert!(e.to_string().contains("nope.json"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let p = relative_to(Some(Path::new("/cfg/run.json")), Path::new("data/m.json"));
        assert_eq!(p, Path::new("/cfg/data/m.json"));
        assert_eq!(relative_to(None, Path::new("m.json")), Path::new("m.json"));
    }
}
