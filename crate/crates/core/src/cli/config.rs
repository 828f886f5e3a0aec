use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fixedpoint::SolveConfig;
use crate::homeworld::{SizeClass, Split};
use crate::planner::PlannerConfig;
use crate::refiner::{ModelConfig, Vocab};
use crate::trainer::TrainConfig;

/// Environment variable that replaces `seeds.seed`.
pub const SEED_ENV: &str = "EQPM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_tasks: usize,
    pub n_scenes: usize,
    pub size: SizeClass,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_tasks: 400,
            n_scenes: 6,
            size: SizeClass::Small,
        }
    }
}

/// Transformer dimensions; the vocabulary size is fixed by the build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub window: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            heads: m.heads,
            blocks: m.blocks,
            ffn_hidden: m.ffn_hidden,
            window: m.window,
        }
    }
}

impl ModelDims {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: Vocab::new().len(),
            d_model: self.d_model,
            heads: self.heads,
            blocks: self.blocks,
            ffn_hidden: self.ffn_hidden,
            window: self.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub splits: Vec<Split>,
    /// Evaluates at most this many tasks per split, in dataset order.
    pub max_tasks: Option<usize>,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: vec![Split::NovelTask],
            max_tasks: None,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Drives dataset generation, initialization, training and decoding.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub dataset: Option<PathBuf>,
    pub refiner: Option<PathBuf>,
    pub world_model: Option<PathBuf>,
    pub memory: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            dataset: None,
            refiner: None,
            world_model: None,
            memory: None,
        }
    }
}

impl Paths {
    fn or_default(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn dataset(&self) -> PathBuf {
        self.or_default(&self.dataset, "dataset.jsonl")
    }

    pub fn refiner(&self) -> PathBuf {
        self.or_default(&self.refiner, "refiner.eqpm")
    }

    pub fn world_model(&self) -> PathBuf {
        self.or_default(&self.world_model, "worldmodel.eqpm")
    }

    pub fn memory(&self) -> PathBuf {
        self.or_default(&self.memory, "memory.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelDims,
    pub solver: SolveConfig,
    pub planner: PlannerConfig,
    /// `training.seed` is replaced by `seeds.seed` when a run starts.
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

#[derive(Debug, thiserror::Error)]
#[error("invalid config at `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn invalid(path: &str, message: impl ToString) -> ConfigError {
    ConfigError {
        path: path.to_string(),
        message: message.to_string(),
    }
}

fn digest(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

impl RunConfig {
    /// Parses a JSON document; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner())
        })?;
        cfg.training.seed = cfg.seeds.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`, then the seed override from the
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| invalid(".", format!("{}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        if let Ok(value) = std::env::var(SEED_ENV) {
            let seed = value
                .trim()
                .parse()
                .map_err(|_| invalid("seeds.seed", format!("{SEED_ENV}=`{value}` is not an unsigned integer")))?;
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seeds.seed = seed;
        self.training.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.seeds.seed
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dataset.n_tasks == 0 {
            return Err(invalid("dataset.n_tasks", "must be positive"));
        }
        if self.dataset.n_scenes == 0 {
            return Err(invalid("dataset.n_scenes", "must be positive"));
        }
        self.model
            .model_config()
            .validate()
            .map_err(|e| invalid("model", e))?;
        self.solver.validate().map_err(|e| invalid("solver", e))?;
        self.planner.validate().map_err(|e| invalid("planner", e))?;
        self.training.validate().map_err(|e| invalid("training", e))?;
        if self.evaluation.jobs == 0 {
            return Err(invalid("evaluation.jobs", "must be positive"));
        }
        if self.evaluation.splits.is_empty() {
            return Err(invalid("evaluation.splits", "must name at least one split"));
        }
        Ok(())
    }

    /// Hash of the whole configuration, embedded in every artifact.
    pub fn config_hash(&self) -> String {
        digest(self)
    }

    /// Hash of the sections that determine trained weights, stored with
    /// checkpoints and compared on load.
    pub fn model_hash(&self) -> String {
        digest(&(&self.dataset, &self.model, &self.training, &self.seeds))
    }
}
