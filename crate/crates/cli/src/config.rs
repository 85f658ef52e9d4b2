//! Run configuration: one JSON document with a section per pipeline stage,
//! plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use episeg::eval::{default_d_grid, default_p_grid, default_t_grid};
use episeg::phantom::DatasetCounts;
use episeg::uncertainty::{SampleReading, UncertaintyKind};
use episeg::{NetworkConfig, PhantomConfig, PostprocParams, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::failure::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub reading: SampleReading,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_samples: 50,
            seed: 0,
            reading: SampleReading::Hard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub d_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub p_grid: Vec<f64>,
    /// Map fed to post-processing and volume scores.
    pub source: UncertaintyKind,
    /// Use the threshold picked by `sweep threshold` when one exists.
    pub use_swept_threshold: bool,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            d_grid: default_d_grid(),
            t_grid: default_t_grid(),
            p_grid: default_p_grid(),
            source: UncertaintyKind::McVariance,
            use_swept_threshold: true,
            histogram_bins: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    pub model_path: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            model_path: PathBuf::from("runs/model.bunw"),
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub dataset: DatasetCounts,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub inference: InferenceConfig,
    pub postproc: PostprocParams,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::missing(anyhow!(e).context(format!("cannot read config {}", p.display()))))?;
                let parsed: RunConfig = serde_json::from_str(&text)
                    .with_context(|| format!("invalid config file {}", p.display()))
                    .map_err(Failure::Config)?;
                serde_json::to_value(parsed).expect("config serializes")
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o).map_err(Failure::Config)?;
        }
        let config: RunConfig = serde_json::from_value(value)
            .context("invalid configuration")
            .map_err(Failure::Config)?;
        config.validate().map_err(Failure::Config)?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.phantom.validate()?;
        self.network.validate()?;
        self.training.validate()?;
        self.postproc.validate()?;
        if self.phantom.num_classes != self.network.num_classes {
            bail!(
                "phantom.num_classes ({}) differs from network.num_classes ({})",
                self.phantom.num_classes,
                self.network.num_classes
            );
        }
        if (self.phantom.height, self.phantom.width) != (self.network.input_rows, self.network.input_cols) {
            bail!(
                "phantom size {}x{} differs from network input {}x{}",
                self.phantom.height,
                self.phantom.width,
                self.network.input_rows,
                self.network.input_cols
            );
        }
        if self.inference.n_samples < 2 {
            bail!("inference.n_samples must be at least 2");
        }
        if self.eval.t_grid.is_empty() || self.eval.t_grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            bail!("eval.t_grid must be a nonempty list of positive thresholds");
        }
        if self.eval.p_grid.is_empty() || self.eval.p_grid.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            bail!("eval.p_grid must be a nonempty list of rates in [0, 1)");
        }
        if self.eval.d_grid.iter().any(|&d| !(0.0..=1.0).contains(&d)) {
            bail!("eval.d_grid entries must lie in [0, 1]");
        }
        if self.eval.histogram_bins == 0 {
            bail!("eval.histogram_bins must be positive");
        }
        Ok(())
    }

    /// Compact JSON; the hashed and persisted form.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Points every seed at `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.training.seed = seed;
        self.inference.seed = seed;
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `a.b.c=v`. The value is parsed as JSON when possible and taken as a
/// string otherwise. Every path segment must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("override {assignment:?} has an empty key");
    }
    let mut node = &mut *root;
    let mut walked = Vec::new();
    for part in key.split('.') {
        walked.push(part);
        node = match node {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| anyhow!("unknown config key {:?}", walked.join(".")))?,
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| anyhow!("{:?} indexes a list and needs a number", walked.join(".")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| anyhow!("index {i} out of range for {:?} (length {len})", walked.join(".")))?
            }
            _ => bail!("{:?} is not a section", walked[..walked.len() - 1].join(".")),
        };
    }
    *node = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = RunConfig::default();
        c.postproc.threshold = 0.07;
        c.eval.t_grid = vec![0.013, 0.1 + 0.2];
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }

    #[test]
    fn overrides_nested_values() {
        let c = RunConfig::load(
            None,
            &[
                "training.epochs=3".into(),
                "postproc.vote_thresholds=[4]".into(),
                "network.channels.0=8".into(),
                "paths.output_dir=/tmp/x".into(),
                "inference.reading=soft".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.postproc.vote_thresholds, vec![4]);
        assert_eq!(c.network.channels[0], 8);
        assert_eq!(c.paths.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.inference.reading, SampleReading::Soft);
    }

    #[test]
    fn unknown_keys_rejected() {
        for o in ["training.epoch=3", "nosuch=1", "training.epochs.x=1"] {
            let err = RunConfig::load(None, &[o.into()]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{o}");
        }
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["eval"]["extra"] = Value::Bool(true);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in ["postproc.threshold=0", "inference.n_samples=1", "network.num_classes=5", "training.epochs=x"] {
            let err = RunConfig::load(None, &[o.into()]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{o}");
        }
    }

    #[test]
    fn partial_file_takes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"training": {"epochs": 2}}"#).unwrap();
        let c = RunConfig::load(Some(&path), &["inference.seed=4".into()]).unwrap();
        assert_eq!(c.training.epochs, 2);
        assert_eq!(c.inference.seed, 4);
        assert_eq!(c.inference.n_samples, 50);
    }

    #[test]
    fn missing_file_is_missing_input() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/c.json")), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.sha256(), b.sha256());
        b.set_seed(5);
        assert_ne!(a.sha256(), b.sha256());
        assert_eq!(a.sha256().len(), 64);
    }
}
