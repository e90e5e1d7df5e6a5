//! TOML experiment configuration.
//!
//! ```toml
//! [topology]
//! kind = "cycle"
//! nodes = 16
//!
//! [algorithm]
//! name = "mw"
//! walks = 4
//! eta = 0.05
//! batch = 8
//!
//! [data]
//! task = "least_squares"
//! n_per_node = 64
//! model_dim = 10
//! hetero_shift = 0.0
//!
//! [run]
//! max_iterations = 20000
//! eval_interval = 100
//! seeds = [1, 2, 3]
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::LearningRate;
use crate::data::Task;
use crate::engine::{DelayModel, EngineConfig, Stop};
use crate::graph::TopologyKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    Mw,
    Gossip,
}

impl AlgorithmName {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmName::Mw => "mw",
            AlgorithmName::Gossip => "gossip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub kind: TopologyKind,
    pub nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_probability: Option<f64>,
    /// Seed for random graph families.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecaySection {
    pub factor: f64,
    pub every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    pub name: AlgorithmName,
    /// Number of walks (multi-walk only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walks: Option<usize>,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_decay: Option<StepDecaySection>,
    pub batch: usize,
    #[serde(default = "default_model_bits")]
    pub model_bits: u64,
    #[serde(default = "default_mean_delay")]
    pub mean_delay: f64,
    /// Splits each delay into computation and communication parts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_fraction: Option<f64>,
    #[serde(default = "default_true")]
    pub hub_mixing: bool,
}

fn default_model_bits() -> u64 {
    32
}

fn default_mean_delay() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub task: Task,
    pub n_per_node: usize,
    pub model_dim: usize,
    /// Planted-model shift; exclusive with `alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hetero_shift: Option<f64>,
    /// Dirichlet concentration for label-skewed shards; exclusive with
    /// `hetero_shift`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub regularization: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sim_time: Option<f64>,
    pub eval_interval: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Also write a per-iteration sidecar CSV.
    #[serde(default)]
    pub trace: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Graph sizes for `analyze`; defaults to the topology's `nodes`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub target: usize,
    /// Monte-Carlo cross-check samples (0 disables).
    #[serde(default)]
    pub mc_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologySection,
    pub algorithm: AlgorithmSection,
    pub data: DataSection,
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisSection>,
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        if t.nodes == 0 {
            return Err(invalid("topology.nodes", "must be >= 1"));
        }
        match (t.kind, t.edge_probability) {
            (TopologyKind::ErdosRenyi, None) => {
                return Err(invalid("topology.edge_probability", "required for erdos_renyi"))
            }
            (TopologyKind::ErdosRenyi, Some(q)) if !(q > 0.0 && q <= 1.0) => {
                return Err(invalid("topology.edge_probability", format!("{q} outside (0, 1]")))
            }
            (kind, Some(_)) if kind != TopologyKind::ErdosRenyi => {
                return Err(invalid("topology.edge_probability", "only allowed for erdos_renyi"))
            }
            _ => {}
        }

        let a = &self.algorithm;
        match (a.name, a.walks) {
            (AlgorithmName::Mw, None) => return Err(invalid("algorithm.walks", "required for mw")),
            (AlgorithmName::Mw, Some(r)) if r == 0 || r > t.nodes => {
                return Err(invalid("algorithm.walks", format!("{r} outside 1..={}", t.nodes)))
            }
            (AlgorithmName::Gossip, Some(_)) => {
                return Err(invalid("algorithm.walks", "only allowed for mw"))
            }
            _ => {}
        }
        self.learning_rate()
            .validate()
            .map_err(|e| invalid("algorithm.eta", e.to_string()))?;
        if a.batch == 0 {
            return Err(invalid("algorithm.batch", "must be >= 1"));
        }
        if a.model_bits == 0 {
            return Err(invalid("algorithm.model_bits", "must be >= 1"));
        }
        if !(a.mean_delay > 0.0 && a.mean_delay.is_finite()) {
            return Err(invalid("algorithm.mean_delay", "must be > 0"));
        }
        if let Some(f) = a.compute_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(invalid("algorithm.compute_fraction", "must be in (0, 1)"));
            }
        }

        let d = &self.data;
        if d.n_per_node == 0 {
            return Err(invalid("data.n_per_node", "must be >= 1"));
        }
        if d.model_dim == 0 {
            return Err(invalid("data.model_dim", "must be >= 1"));
        }
        match (d.hetero_shift, d.alpha) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(invalid("data.hetero_shift", "exactly one of hetero_shift and alpha is required"))
            }
            (Some(s), None) if !(s >= 0.0 && s.is_finite()) => {
                return Err(invalid("data.hetero_shift", "must be >= 0"))
            }
            (None, Some(al)) if !(al > 0.0 && al.is_finite()) => {
                return Err(invalid("data.alpha", "must be > 0"))
            }
            _ => {}
        }
        if d.alpha.is_some() && d.task != Task::Logistic {
            return Err(invalid("data.task", "alpha partitioning produces logistic data"));
        }
        if d.alpha.is_some() && d.classes < 2 {
            return Err(invalid("data.classes", "must be >= 2"));
        }
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return Err(invalid("data.noise_std", "must be >= 0"));
        }
        if !(d.regularization >= 0.0 && d.regularization.is_finite()) {
            return Err(invalid("data.regularization", "must be >= 0"));
        }

        let r = &self.run;
        match (r.max_iterations, r.max_sim_time) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(invalid("run.max_iterations", "exactly one of max_iterations and max_sim_time is required"))
            }
            (None, Some(z)) if !(z >= 0.0 && z.is_finite()) => {
                return Err(invalid("run.max_sim_time", "must be >= 0"))
            }
            _ => {}
        }
        if r.eval_interval == 0 {
            return Err(invalid("run.eval_interval", "must be >= 1"));
        }
        if r.seeds.is_empty() {
            return Err(invalid("run.seeds", "must not be empty"));
        }
        if let Some(an) = &self.analysis {
            if an.nodes.contains(&0) {
                return Err(invalid("analysis.nodes", "sizes must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> LearningRate {
        let a = &self.algorithm;
        match &a.step_decay {
            None => LearningRate::Constant { eta: a.eta },
            Some(s) => LearningRate::StepDecay {
                initial: a.eta,
                factor: s.factor,
                every: s.every,
            },
        }
    }

    pub fn stop(&self) -> Stop {
        match (self.run.max_iterations, self.run.max_sim_time) {
            (Some(n), _) => Stop::MaxIterations(n),
            (None, Some(z)) => Stop::MaxSimTime(z),
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn engine(&self) -> EngineConfig {
        let a = &self.algorithm;
        EngineConfig {
            mean_delay: a.mean_delay,
            delay_model: match a.compute_fraction {
                None => DelayModel::Lumped,
                Some(f) => DelayModel::Split { compute_fraction: f },
            },
            per_actor_delay: None,
            model_bits: a.model_bits,
        }
    }

    /// Graph sizes for `analyze`.
    pub fn analysis_nodes(&self) -> Vec<usize> {
        match &self.analysis {
            Some(a) if !a.nodes.is_empty() => a.nodes.clone(),
            _ => vec![self.topology.nodes],
        }
    }
}
