//! Run configuration: a TOML file mirrored by CLI flags. Defaults follow
//! the geometry defaults used elsewhere (N = 4, lambda = 0.01).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::convops::ReduceMode;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Double,
    Single,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory of source meshes (and labels) for preprocessing/training.
    pub dataset_dir: String,
    /// Directory holding preprocess caches.
    pub cache_dir: String,
    /// Path to the network description JSON.
    pub network: String,
    /// Checkpoint path for train/eval/infer.
    pub checkpoint: String,
    /// Frame symmetry order.
    pub n: usize,
    /// Guided-solve regularization weight.
    pub lambda: f64,
    /// Vertex-count targets for the coarser hierarchy levels, finest first.
    pub level_targets: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Gradient-accumulation batch size (meshes per optimizer step).
    pub batch: usize,
    pub reduce_mode: ReduceMode,
    pub pool_mode: ReduceMode,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: "data".into(),
            cache_dir: "cache".into(),
            network: "network.json".into(),
            checkpoint: "model.ckpt".into(),
            n: 4,
            lambda: 0.01,
            level_targets: vec![170, 56],
            learning_rate: 0.01,
            epochs: 50,
            seed: 0,
            batch: 1,
            reduce_mode: ReduceMode::Max,
            pool_mode: ReduceMode::Max,
            precision: Precision::Double,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 || self.n > 8 {
            return Err(ConfigError::Invalid(format!(
                "symmetry order must be in 1..=8, got {}",
                self.n
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(ConfigError::Invalid("lambda must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::Invalid("learning rate must be > 0".into()));
        }
        if self.batch == 0 {
            return Err(ConfigError::Invalid("batch must be >= 1".into()));
        }
        for w in self.level_targets.windows(2) {
            if w[1] >= w[0] {
                return Err(ConfigError::Invalid(
                    "level targets must strictly decrease".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn rosy_options(&self) -> crate::frames::RosyOptions {
        crate::frames::RosyOptions {
            n: self.n,
            lambda: self.lambda,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_file() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.n, 4);
        assert!((cfg.lambda - 0.01).abs() < 1e-15);
        assert_eq!(cfg.precision, Precision::Double);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "n = 6\nseed = 7\nprecision = \"single\"\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.n, 6);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.precision, Precision::Single);
        assert!((cfg.lambda - 0.01).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "n = 0\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::Invalid(_))));
        std::fs::write(&p, "level_targets = [50, 50]\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::Invalid(_))));
        std::fs::write(&p, "no_such_key = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::Parse { .. })));
    }
}
