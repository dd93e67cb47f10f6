//! Experiment configuration: one JSON file drives every pipeline stage.
//!
//! The config names the input files, the filter/match/split settings, the
//! feature and model hyperparameters, and a single master seed. Every
//! artifact a subcommand writes embeds the config's hash and the effective
//! seed, so downstream stages can refuse inputs produced under different
//! settings and any run can be reproduced byte for byte.
//!
//! One experiment, one seed: the master seed feeds matching, splitting, and
//! training alike. Setting the `DISPUTELAB_SEED` environment variable
//! overrides the seed from the file (useful for seed sweeps without editing
//! configs); the override participates in the config hash, so artifacts from
//! different seeds never silently mix.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::corpus::FilterConfig;
use crate::dataset::{MatchConfig, SplitSpec};
use crate::features::FeatureSet;
use crate::linear::{Regularization, C_GRID};
use crate::models::{Architecture, ModelConfig, TrainConfig};

/// Environment variable that overrides the config seed when set.
pub const SEED_ENV_VAR: &str = "DISPUTELAB_SEED";

/// Input and output locations. Input paths must exist when the config is
/// validated; the output directory is created on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Line-delimited raw corpus (one conversation per line).
    pub corpus: PathBuf,
    /// Directory of `.lex` lexicon files overriding the builtins; optional.
    pub lexicons: Option<PathBuf>,
    /// Pre-trained word embeddings in the `token v1..vd` text format;
    /// required by the neural subcommands only.
    pub embeddings: Option<PathBuf>,
    /// Where every artifact is written.
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: PathBuf::from("corpus.jsonl"),
            lexicons: None,
            embeddings: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Which marker family the feature-based models use, and whether the
/// per-feature trend slopes accompany the means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesConfig {
    /// One of `toxicity`, `sentiment`, `politeness`, `collaboration`,
    /// `combined`.
    pub set: String,
    /// Append the `:gradient` columns alongside the `:mean` columns.
    pub gradients: bool,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig { set: "combined".into(), gradients: true }
    }
}

impl FeaturesConfig {
    pub fn feature_set(&self) -> Result<FeatureSet, ConfigError> {
        self.set.parse().map_err(|e: String| ConfigError::Invalid(e))
    }
}

/// Logistic-regression settings: a fixed candidate for `train-linear`, the
/// whole grid for `grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearConfig {
    /// `l1` or `l2`.
    pub regularization: String,
    /// Inverse regularization strength for a single fit.
    pub c: f64,
    /// Grid of C values swept by the `grid` subcommand (both penalties are
    /// tried at each).
    pub c_grid: Vec<f64>,
    /// Vocabulary size for the bag-of-words reference model.
    pub bag_of_words_vocab: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            regularization: "l2".into(),
            c: 1.0,
            c_grid: C_GRID.to_vec(),
            bag_of_words_vocab: 1000,
        }
    }
}

impl LinearConfig {
    pub fn regularization(&self) -> Result<Regularization, ConfigError> {
        match self.regularization.as_str() {
            "l1" => Ok(Regularization::L1),
            "l2" => Ok(Regularization::L2),
            other => Err(ConfigError::Invalid(format!(
                "unknown regularization {other:?} (expected \"l1\" or \"l2\")"
            ))),
        }
    }
}

/// Evaluation knobs shared by `evaluate`, `trace`, `early-eval`, and `serve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Monte-Carlo dropout samples per prediction.
    pub mc_samples: usize,
    /// Label shuffles per permutation test.
    pub permutation_iterations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { mc_samples: 30, permutation_iterations: 1000 }
    }
}

/// The complete experiment description.
///
/// Every field has a default, so a minimal config file only names the paths
/// it needs. Nested seeds (`matching.seed`, `split.seed`, `train.seed`) are
/// not read from the file: [`ExperimentConfig::load`] overwrites them with
/// the master seed so one number pins the whole experiment down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub filter: FilterConfig,
    pub matching: MatchConfig,
    pub split: SplitSpec,
    pub features: FeaturesConfig,
    pub linear: LinearConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Width of the embedding vectors in `paths.embeddings`.
    pub embedding_dimension: usize,
    /// Master seed; see the module docs for how it propagates.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            paths: Paths::default(),
            filter: FilterConfig::default(),
            matching: MatchConfig::default(),
            split: SplitSpec::default(),
            features: FeaturesConfig::default(),
            linear: LinearConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            embedding_dimension: 50,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parse a config file, apply the `DISPUTELAB_SEED` override if present,
    /// and propagate the master seed into the per-stage configs.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: ExperimentConfig = serde_json::from_str(&content)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        if let Ok(raw) = std::env::var(SEED_ENV_VAR) {
            config.seed = raw.parse().map_err(|_| {
                ConfigError::Invalid(format!("{SEED_ENV_VAR}={raw:?} is not an unsigned integer"))
            })?;
        }
        config.propagate_seed();
        Ok(config)
    }

    /// Copy the master seed into every stage that consumes one.
    pub fn propagate_seed(&mut self) {
        self.matching.seed = self.seed;
        self.split.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Check internal consistency and that every referenced input path
    /// exists. The output directory is not required to exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.filter.validate().map_err(ConfigError::Invalid)?;
        self.matching.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.features.feature_set()?;
        self.linear.regularization()?;
        if !(self.linear.c > 0.0) {
            return Err(ConfigError::Invalid(format!("linear.c must be positive, got {}", self.linear.c)));
        }
        if self.linear.c_grid.is_empty() || self.linear.c_grid.iter().any(|&c| !(c > 0.0)) {
            return Err(ConfigError::Invalid("linear.c_grid must be non-empty and positive".into()));
        }
        if self.embedding_dimension == 0 {
            return Err(ConfigError::Invalid("embedding_dimension must be positive".into()));
        }
        if self.eval.mc_samples == 0 {
            return Err(ConfigError::Invalid("eval.mc_samples must be at least 1".into()));
        }
        if self.eval.permutation_iterations == 0 {
            return Err(ConfigError::Invalid("eval.permutation_iterations must be at least 1".into()));
        }
        self.require_exists(&self.paths.corpus, "paths.corpus")?;
        if let Some(dir) = &self.paths.lexicons {
            self.require_exists(dir, "paths.lexicons")?;
        }
        if let Some(file) = &self.paths.embeddings {
            self.require_exists(file, "paths.embeddings")?;
        }
        Ok(())
    }

    fn require_exists(&self, path: &Path, field: &str) -> Result<(), ConfigError> {
        if path.exists() {
            Ok(())
        } else {
            Err(ConfigError::MissingPath { field: field.to_string(), path: path.to_path_buf() })
        }
    }

    /// Hash of the canonical serialization of the fully resolved config
    /// (seed override applied). Artifacts produced under different settings
    /// therefore never share a hash.
    ///
    /// One field is normalized out: `model.architecture`. Selecting an
    /// architecture names which checkpoint gets trained (`model_<tag>.json`)
    /// without changing any data a stage consumes, and comparing
    /// architectures side by side requires their checkpoints to coexist in
    /// one experiment. The checkpoint file itself records its architecture,
    /// so cross-architecture loads are still rejected.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.model.architecture = Architecture::Hierarchical;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(2 * digest.len());
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// The `#` metadata lines stamped onto every text artifact.
    pub fn artifact_header(&self) -> Vec<String> {
        vec![format!("config_hash={}", self.hash()), format!("seed={}", self.seed)]
    }

    /// Resolve a file name inside the output directory.
    pub fn output_path(&self, name: &str) -> PathBuf {
        self.paths.output_dir.join(name)
    }
}

/// Errors from loading or validating a config file.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config field {field} names a missing path: {path}")]
    MissingPath { field: String, path: PathBuf },
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    /// `load` reads `DISPUTELAB_SEED`, and env vars are process-global, so
    /// tests touching either must not interleave.
    static ENV_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

    #[test]
    fn minimal_config_round_trips_with_defaults() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_file(dir.path(), "c.jsonl", "");
        let cfg_path = write_file(
            dir.path(),
            "cfg.json",
            &format!(r#"{{"paths": {{"corpus": {:?}}}, "seed": 7}}"#, corpus),
        );
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.matching.seed, 7);
        assert_eq!(cfg.split.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.eval.mc_samples, 30);
        assert_eq!(cfg.linear.c_grid, vec![0.1, 1.0, 10.0, 100.0]);
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = ExperimentConfig::default();
        c.seed = 1;
        c.propagate_seed();
        assert_ne!(a.hash(), c.hash());
        let mut d = ExperimentConfig::default();
        d.model.hidden = 64;
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn validate_reports_missing_paths_by_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.paths.corpus = PathBuf::from("/definitely/not/here.jsonl");
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("paths.corpus"), "got: {err}");

        let dir = tempfile::tempdir().unwrap();
        cfg.paths.corpus = write_file(dir.path(), "c.jsonl", "");
        cfg.paths.embeddings = Some(PathBuf::from("/nope.vec"));
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("paths.embeddings"), "got: {err}");
    }

    #[test]
    fn validate_rejects_bad_knobs() {
        let mut cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        cfg.paths.corpus = write_file(dir.path(), "c.jsonl", "");
        cfg.features.set = "moods".into();
        assert!(cfg.validate().is_err());
        cfg.features.set = "combined".into();
        cfg.linear.regularization = "l3".into();
        assert!(cfg.validate().is_err());
        cfg.linear.regularization = "l1".into();
        cfg.linear.c = 0.0;
        assert!(cfg.validate().is_err());
        cfg.linear.c = 1.0;
        cfg.eval.mc_samples = 0;
        assert!(cfg.validate().is_err());
        cfg.eval.mc_samples = 30;
        cfg.validate().unwrap();
    }

    #[test]
    fn env_override_wins_and_feeds_the_hash() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_file(dir.path(), "c.jsonl", "");
        let cfg_path = write_file(
            dir.path(),
            "cfg.json",
            &format!(r#"{{"paths": {{"corpus": {:?}}}, "seed": 7}}"#, corpus),
        );
        // Env vars are process-global; restore whatever was there.
        let saved = std::env::var(SEED_ENV_VAR).ok();
        std::env::set_var(SEED_ENV_VAR, "99");
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        std::env::set_var(SEED_ENV_VAR, "bogus");
        let bad = ExperimentConfig::load(&cfg_path);
        match saved {
            Some(v) => std::env::set_var(SEED_ENV_VAR, v),
            None => std::env::remove_var(SEED_ENV_VAR),
        }
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.train.seed, 99);
        assert!(bad.is_err());
        let mut plain = cfg.clone();
        plain.seed = 7;
        plain.propagate_seed();
        assert_ne!(cfg.hash(), plain.hash());
    }
}
