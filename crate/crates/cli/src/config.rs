//! Experiment configuration files.
//!
//! An experiment is a TOML document with a top-level `seeds` list, an optional
//! `output_dir`, and the sections `[data]`, `[protocol]` and `[train]`:
//!
//! ```toml
//! seeds = [0, 1, 2]
//!
//! [data]
//! dir = "bench"              # directory holding dataset.toml
//! # or an inline generator:
//! # [data.synthetic]
//! # classes = 14
//!
//! [protocol]
//! base_classes = 10
//! sessions = 2
//! ways = 2
//! shots = 5
//!
//! [train]
//! method = "poet"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use poet_core::data::{load_dataset_dir, synth_generate, ProtocolSpec, SkeletonTopology, SplitDataset, SynthParams};
use poet_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSource,
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
}

/// Inline synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    /// `"chain"`, `"body"` or `"hand"`.
    pub topology: String,
    /// Joint count of a chain topology.
    pub joints: usize,
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub time_steps: usize,
    pub noise_sigma: f64,
    pub phase_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            topology: "chain".into(),
            joints: 25,
            classes: 10,
            per_class_train: 30,
            per_class_test: 20,
            time_steps: 16,
            noise_sigma: 0.3,
            phase_jitter: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticData {
    pub fn topology(&self) -> Result<SkeletonTopology> {
        match self.topology.as_str() {
            "chain" => Ok(SkeletonTopology::chain(self.joints).map_err(|e| prefixed("data.synthetic", e))?),
            "body" => Ok(SkeletonTopology::body25()),
            "hand" => Ok(SkeletonTopology::hand22()),
            other => Err(CliError::config(
                "data.synthetic.topology",
                format!("unknown topology `{other}`; use \"chain\", \"body\" or \"hand\""),
            )),
        }
    }

    pub fn params(&self) -> SynthParams {
        SynthParams {
            class_count: self.classes,
            per_class_train: self.per_class_train,
            per_class_test: self.per_class_test,
            time_steps: self.time_steps,
            noise_sigma: self.noise_sigma,
            phase_jitter: self.phase_jitter,
            seed: self.seed,
        }
    }
}

/// Re-keys a core configuration error under `section`.
pub fn prefixed(section: &str, e: poet_core::Error) -> CliError {
    match e {
        poet_core::Error::Config { key, message } if !key.starts_with(section) => CliError::config(format!("{section}.{key}"), message),
        other => other.into(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses TOML into `T`, naming the offending key (or line) on failure.
pub fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = toml::de::Deserializer::parse(text).map_err(|e| {
        let key = e.span().map_or_else(|| "<document>".to_string(), |s| format!("line {}", line_of(text, s.start)));
        CliError::config(key, e.message().trim())
    })?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { "<document>".to_string() } else { path };
        CliError::config(key, e.inner().message().trim())
    })
}

impl ExperimentConfig {
    /// Reads and validates a config file. Relative paths become absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: ExperimentConfig = parse_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(dir) = &mut cfg.data.dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed is required"));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(CliError::config("seeds", "seeds must be distinct"));
        }
        match (&self.data.dir, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(CliError::config("data", "set either `dir` or `[data.synthetic]`, not both")),
            (None, None) => return Err(CliError::config("data", "set `dir` or a `[data.synthetic]` table")),
            (Some(dir), None) => {
                let manifest = dir.join("dataset.toml");
                if !manifest.is_file() {
                    return Err(CliError::config("data.dir", format!("{} does not exist", manifest.display())));
                }
            }
            (None, Some(s)) => {
                s.topology()?;
            }
        }
        self.train.validate().map_err(|e| prefixed("train", e))?;
        if self.protocol.base_classes == 0 {
            return Err(CliError::config("protocol.base_classes", "must be at least 1"));
        }
        if self.protocol.sessions > 0 && (self.protocol.ways == 0 || self.protocol.shots == 0) {
            return Err(CliError::config("protocol.ways", "ways and shots must be at least 1"));
        }
        Ok(())
    }

    /// Loads or generates the dataset.
    pub fn dataset(&self) -> Result<(SkeletonTopology, SplitDataset)> {
        if let Some(dir) = &self.data.dir {
            let (_, topology, ds) = load_dataset_dir(dir, None)?;
            return Ok((topology, ds));
        }
        let s = self.data.synthetic.as_ref().expect("validated data source");
        let topology = s.topology()?;
        let ds = synth_generate(&topology, &s.params()).map_err(|e| prefixed("data.synthetic", e))?;
        Ok((topology, ds))
    }

    /// The training configuration and protocol for one seed. The seed drives model
    /// initialisation, shuffling and the choice of few-shot samples.
    pub fn for_seed(&self, seed: u64) -> (TrainConfig, ProtocolSpec) {
        let mut train = self.train.clone();
        train.seed = seed;
        let mut protocol = self.protocol.clone();
        protocol.seed = seed;
        (train, protocol)
    }

    /// Canonical TOML of everything that determines results. Seeds and the output
    /// location are excluded.
    pub fn canonical(&self) -> Result<String> {
        let mut c = self.clone();
        c.seeds = Vec::new();
        c.output_dir = None;
        c.train.seed = 0;
        c.protocol.seed = 0;
        toml::to_string(&c).map_err(|e| CliError::config("<document>", e.to_string()))
    }

    /// First 12 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical()?.as_bytes());
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::config("<document>", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seeds = [1, 2]

[data.synthetic]
classes = 6

[protocol]
base_classes = 2
sessions = 2
ways = 2
shots = 3
"#;

    fn key_of(text: &str) -> String {
        match parse_toml::<ExperimentConfig>(text).and_then(|c| c.validate().map(|_| c)) {
            Err(CliError::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c: ExperimentConfig = parse_toml(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.data.synthetic.as_ref().unwrap().joints, 25);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(&MINIMAL.replace("shots = 3", "shots = \"three\"")), "protocol.shots");
        assert_eq!(key_of(&format!("{MINIMAL}\n[train]\nlambda = -1.0\n")), "train.lambda");
        assert_eq!(key_of(&format!("{MINIMAL}\n[train]\nsession = {{ epochs = 1, lr = 0.1, batch = 0 }}\n")), "train.session.batch");
        assert_eq!(key_of(&format!("{MINIMAL}\n[train]\nmethod = \"replay\"\n")), "train.method");
        assert_eq!(key_of(&format!("{MINIMAL}\n[train]\nbogus = 1\n")), "train.bogus");
        assert_eq!(key_of(&MINIMAL.replace("seeds = [1, 2]", "seeds = []")), "seeds");
        assert_eq!(key_of(&MINIMAL.replace("classes = 6", "topology = \"star\"")), "data.synthetic.topology");
        assert!(key_of("seeds = [").starts_with("line"));
    }

    #[test]
    fn hash_ignores_seeds_and_output() {
        let a: ExperimentConfig = parse_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.seeds = vec![9];
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.lambda = 0.2;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 12);
    }

    #[test]
    fn resolved_config_round_trips() {
        let a: ExperimentConfig = parse_toml(MINIMAL).unwrap();
        let back: ExperimentConfig = parse_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, back);
    }
}
